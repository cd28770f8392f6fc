//! Simulated fallible experts with group-conditional accuracy and query costs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostVector, Dataset, Label, Observation, Sample};

/// Group ids used by the built-in panels.
pub mod groups {
    pub const ORANGE: usize = 0;
    pub const BLUE: usize = 1;
    pub const NON_AAE: usize = 0;
    pub const AAE: usize = 1;
}

/// Cost of asking an expert about one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cost {
    Constant(f64),
    PerGroup(BTreeMap<usize, f64>),
}

impl Cost {
    pub fn of(&self, obs: &Observation) -> f64 {
        match self {
            Cost::Constant(c) => *c,
            Cost::PerGroup(map) => map.get(&obs.group).copied().unwrap_or(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Cost::Constant(c) => c.is_finite() && *c >= 0.0,
            Cost::PerGroup(map) => map.values().all(|c| c.is_finite() && *c >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("costs must be non-negative, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub id: String,
    /// Probability of reporting the true label, per group.
    pub accuracy_by_group: BTreeMap<usize, f64>,
    pub cost: Cost,
}

impl ExpertModel {
    pub fn new(id: impl Into<String>, accuracy_by_group: BTreeMap<usize, f64>, cost: Cost) -> Result<Self> {
        let id = id.into();
        if let Some((g, a)) = accuracy_by_group.iter().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
            return Err(Error::config(format!("expert {id}: accuracy {a} for group {g} outside [0,1]")));
        }
        cost.validate()?;
        Ok(ExpertModel { id, accuracy_by_group, cost })
    }

    fn with_accuracies(id: impl Into<String>, acc: &[(usize, f64)]) -> Self {
        ExpertModel::new(id, acc.iter().copied().collect(), Cost::Constant(1.0))
            .expect("built-in panel is valid")
    }

    pub fn accuracy(&self, group: usize) -> Result<f64> {
        self.accuracy_by_group
            .get(&group)
            .copied()
            .ok_or_else(|| Error::config(format!("expert {} has no accuracy for group {group}", self.id)))
    }

    /// Reports `true_label` with the group's accuracy, otherwise its
    /// complement. Consumes exactly one draw from `rng`.
    pub fn predict<R: Rng + ?Sized>(&self, group: usize, true_label: Label, rng: &mut R) -> Result<Label> {
        let acc = self.accuracy(group)?;
        let u: f64 = rng.random();
        Ok(if u < acc { true_label } else { 1 - true_label })
    }
}

/// Free-function form of [`ExpertModel::predict`] for a full sample.
pub fn expert_predict<R: Rng + ?Sized>(e: &ExpertModel, s: &Sample, rng: &mut R) -> Result<Label> {
    e.predict(s.group(), s.true_label, rng)
}

/// The human experts of a pipeline, in slot order. The classifier takes the
/// slot after the last expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPanel {
    experts: Vec<ExpertModel>,
}

impl ExpertPanel {
    pub fn new(experts: Vec<ExpertModel>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::config("expert panel is empty"));
        }
        let mut seen = HashSet::new();
        for e in &experts {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::config(format!("duplicate expert id {}", e.id)));
            }
        }
        Ok(ExpertPanel { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Slot count including the classifier.
    pub fn num_slots(&self) -> usize {
        self.experts.len() + 1
    }

    pub fn experts(&self) -> &[ExpertModel] {
        &self.experts
    }

    pub fn costs(&self, obs: &Observation) -> CostVector {
        let c: Vec<f64> = self.experts.iter().map(|e| e.cost.of(obs)).collect();
        CostVector::new(&c).expect("costs validated at construction")
    }

    /// One vote per expert, each drawn from that expert's own stream.
    pub fn predict_all(&self, group: usize, true_label: Label, rngs: &mut ExpertRngs) -> Result<Vec<Label>> {
        self.experts
            .iter()
            .zip(rngs.streams.iter_mut())
            .map(|(e, rng)| e.predict(group, true_label, rng))
            .collect()
    }
}

/// Independent random streams, one per expert, so that changing the deferral
/// policy never shifts an expert's coin flips.
#[derive(Debug, Clone)]
pub struct ExpertRngs {
    streams: Vec<ChaCha8Rng>,
}

impl ExpertRngs {
    pub fn new(seed: u64, num_experts: usize) -> Self {
        let streams = (0..num_experts)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        ExpertRngs { streams }
    }
}

/// Two experts for the cluster task: `e1` is perfect on orange and right only
/// 20% of the time on blue; `e2` is the mirror image.
pub fn make_cluster_experts() -> ExpertPanel {
    use groups::{BLUE, ORANGE};
    ExpertPanel::new(vec![
        ExpertModel::with_accuracies("e1", &[(ORANGE, 1.0), (BLUE, 0.2)]),
        ExpertModel::with_accuracies("e2", &[(ORANGE, 0.2), (BLUE, 1.0)]),
    ])
    .unwrap()
}

/// Forty content-moderation experts: thirty with experience in the non-AAE
/// dialect (accuracy `p_j = 0.6 + 0.4 j/30` there and `p_j - 0.3` on AAE posts)
/// and ten with experience in AAE (`p_j = 0.6 + 0.4 (j-30)/10` on AAE, `p_j - 0.3`
/// on non-AAE posts).
pub fn make_cm_experts() -> ExpertPanel {
    use groups::{AAE, NON_AAE};
    let mut experts = Vec::with_capacity(40);
    for j in 1..=30 {
        let p = 0.6 + 0.4 * j as f64 / 30.0;
        experts.push(ExpertModel::with_accuracies(format!("e{j}"), &[(NON_AAE, p), (AAE, p - 0.3)]));
    }
    for j in 31..=40 {
        let p = 0.6 + 0.4 * (j - 30) as f64 / 10.0;
        experts.push(ExpertModel::with_accuracies(format!("e{j}"), &[(AAE, p), (NON_AAE, p - 0.3)]));
    }
    ExpertPanel::new(experts).unwrap()
}

/// Number of experts biased against group 0 in [`biased_panel`].
pub fn biased_count(m: usize, alpha: f64) -> usize {
    (alpha * m as f64).round() as usize
}

/// `m` experts of which `round(alpha * m)` are coin-flips on group 0 and
/// perfect on group 1; the rest are the reverse.
pub fn biased_panel(m: usize, alpha: f64) -> Result<ExpertPanel> {
    if m < 1 {
        return Err(Error::config("biased panel needs at least one expert"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0,1]")));
    }
    let exact = alpha * m as f64;
    let against_zero = biased_count(m, alpha);
    if (exact - against_zero as f64).abs() > 1e-9 {
        log::warn!("alpha*m = {exact} is not integral; using {against_zero} experts biased against group 0");
    }
    let experts = (0..m)
        .map(|i| {
            let acc = if i < against_zero { [(0, 0.5), (1, 1.0)] } else { [(0, 1.0), (1, 0.5)] };
            ExpertModel::with_accuracies(format!("b{}", i + 1), &acc)
        })
        .collect();
    ExpertPanel::new(experts)
}

/// Source of expert votes for the training loop.
///
/// The training code sees only [`Observation`]s; the annotator holds whatever
/// ground truth the simulated experts need.
pub trait Annotator {
    fn num_experts(&self) -> usize;

    fn votes(&mut self, obs: &Observation) -> Result<Vec<Label>>;

    fn costs(&self, obs: &Observation) -> CostVector;

    /// Ground truth, for oracle-label ablations only.
    fn reveal(&self, obs: &Observation) -> Result<Label>;
}

/// Annotator backed by a simulated [`ExpertPanel`].
#[derive(Debug, Clone)]
pub struct PanelAnnotator {
    panel: ExpertPanel,
    truth: HashMap<u64, Label>,
    rngs: ExpertRngs,
}

impl PanelAnnotator {
    pub fn new(panel: ExpertPanel, samples: &[Sample], seed: u64) -> Self {
        let rngs = ExpertRngs::new(seed, panel.len());
        let truth = samples.iter().map(|s| (s.id(), s.true_label)).collect();
        PanelAnnotator { panel, truth, rngs }
    }

    pub fn from_dataset(panel: ExpertPanel, data: &Dataset, seed: u64) -> Self {
        Self::new(panel, &data.samples, seed)
    }

    pub fn panel(&self) -> &ExpertPanel {
        &self.panel
    }

    /// Overwrites the stored ground truth of one input.
    pub fn set_truth(&mut self, id: u64, label: Label) {
        self.truth.insert(id, label);
    }
}

impl Annotator for PanelAnnotator {
    fn num_experts(&self) -> usize {
        self.panel.len()
    }

    fn votes(&mut self, obs: &Observation) -> Result<Vec<Label>> {
        let label = self.reveal(obs)?;
        self.panel.predict_all(obs.group, label, &mut self.rngs)
    }

    fn costs(&self, obs: &Observation) -> CostVector {
        self.panel.costs(obs)
    }

    fn reveal(&self, obs: &Observation) -> Result<Label> {
        self.truth
            .get(&obs.id)
            .copied()
            .ok_or_else(|| Error::config(format!("no ground truth for input {}", obs.id)))
    }
}
