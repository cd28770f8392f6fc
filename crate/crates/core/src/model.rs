//! Shared domain types and simplex arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class label, `0` or `1`.
pub type Label = u8;

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// What the classifier and deferrer are allowed to see of an input.
///
/// There is no label here. Training code only ever handles `Observation`s, so
/// ground truth cannot leak into a training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub features: Vec<f64>,
    pub group: usize,
}

/// A simulated input: the observable part plus the hidden ground truth, which
/// only experts and evaluation read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub obs: Observation,
    pub true_label: Label,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f64>, group: usize, true_label: Label) -> Result<Self> {
        if true_label > 1 {
            return Err(Error::config(format!("sample {id}: label {true_label} is not binary")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample {id}: non-finite feature")));
        }
        Ok(Sample { obs: Observation { id, features, group }, true_label })
    }

    pub fn id(&self) -> u64 {
        self.obs.id
    }

    pub fn features(&self) -> &[f64] {
        &self.obs.features
    }

    pub fn group(&self) -> usize {
        self.obs.group
    }
}

/// A finite labelled dataset with named categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `group_names[g]` is the printable name of category `g`.
    pub group_names: Vec<String>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features().len())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.samples.iter().map(|s| s.obs.clone()).collect()
    }

    /// Checks the per-sample invariants: consistent dimension, finite
    /// features, binary labels and declared groups.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        for s in &self.samples {
            if s.features().len() != dim {
                return Err(Error::Shape { expected: dim, got: s.features().len() });
            }
            if s.features().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {}: non-finite feature", s.id())));
            }
            if s.true_label > 1 {
                return Err(Error::config(format!("sample {}: non-binary label", s.id())));
            }
            if s.group() >= self.num_groups() {
                return Err(Error::config(format!(
                    "sample {}: group {} outside declared set of {}",
                    s.id(),
                    s.group(),
                    self.num_groups()
                )));
            }
        }
        Ok(())
    }
}

/// A point of the probability simplex: non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates `weights` against the simplex invariants.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::DegenerateWeights("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < -SIMPLEX_TOL || *w > 1.0 + SIMPLEX_TOL) {
            return Err(Error::DegenerateWeights(format!("entry outside [0,1]: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::DegenerateWeights(format!("weights sum to {sum}")));
        }
        Ok(SimplexVector(weights))
    }

    pub fn uniform(m: usize) -> Self {
        SimplexVector(vec![1.0 / m as f64; m])
    }

    /// Wraps weights that are on the simplex by construction (softmax output,
    /// projection output). Checked in debug builds only.
    pub(crate) fn from_trusted(weights: Vec<f64>) -> Self {
        debug_assert!(
            (weights.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "not on simplex: {weights:?}"
        );
        SimplexVector(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    /// Convex combination `mu * self + (1 - mu) * other`, renormalized.
    pub fn mix(&self, other: &SimplexVector, mu: f64) -> Result<SimplexVector> {
        if self.len() != other.len() {
            return Err(Error::Shape { expected: self.len(), got: other.len() });
        }
        let mixed: Vec<f64> =
            self.0.iter().zip(&other.0).map(|(a, b)| mu * a + (1.0 - mu) * b).collect();
        normalize(&mixed)
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `[e_1(x), ..., e_{m-1}(x), f(x)]`: binary expert votes followed by the
/// classifier probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    pub fn new(votes: &[Label], classifier_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&classifier_prob) {
            return Err(Error::Numeric(format!("classifier output {classifier_prob} outside [0,1]")));
        }
        let mut values = Vec::with_capacity(votes.len() + 1);
        for &v in votes {
            if v > 1 {
                return Err(Error::config(format!("expert vote {v} is not binary")));
            }
            values.push(f64::from(v));
        }
        values.push(classifier_prob);
        Ok(PredictionVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Slot count of the human experts.
    pub fn num_experts(&self) -> usize {
        self.0.len() - 1
    }

    pub fn classifier_prob(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Replaces the classifier entry, keeping the expert votes.
    pub fn with_classifier_prob(&self, prob: f64) -> Self {
        let mut values = self.0.clone();
        let last = values.len() - 1;
        values[last] = prob;
        PredictionVector(values)
    }

    /// Hard vote of slot `i`: expert votes as-is, classifier thresholded at 0.5.
    pub fn vote(&self, i: usize) -> Label {
        if i == self.0.len() - 1 {
            Label::from(self.0[i] > 0.5)
        } else {
            self.0[i] as Label
        }
    }
}

/// Per-slot query costs; the classifier slot is free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVector(Vec<f64>);

impl CostVector {
    pub fn new(expert_costs: &[f64]) -> Result<Self> {
        if expert_costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::config(format!("costs must be non-negative: {expert_costs:?}")));
        }
        let mut costs = expert_costs.to_vec();
        costs.push(0.0);
        Ok(CostVector(costs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Scales a non-negative vector onto the simplex.
pub fn normalize(v: &[f64]) -> Result<SimplexVector> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::DegenerateWeights(format!("negative or non-finite entry in {v:?}")));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateWeights("all-zero weights".into()));
    }
    Ok(SimplexVector(v.iter().map(|x| x / sum).collect()))
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
///
/// Finds the largest `rho` such that `u_rho - (sum_{i<=rho} u_i - 1) / rho > 0`
/// over the descending sort `u`, then clips `v - tau` at zero.
pub fn project_simplex(v: &[f64]) -> SimplexVector {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    SimplexVector(v.iter().map(|x| (x - tau).max(0.0)).collect())
}
