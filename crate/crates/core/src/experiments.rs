//! Data generators, metrics, and end-to-end task runners.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CustomExpert, RunConfig, SeedStreams, Stream};
use crate::dsim::{make_cluster_dsim, make_cm_dsim, DSimTable, Similarity, CLASSIFIER_PRIOR};
use crate::error::{Error, Result};
use crate::experts::{biased_panel, groups, Cost, ExpertModel, make_cluster_experts, make_cm_experts, Annotator, ExpertPanel, PanelAnnotator};
use crate::model::{Dataset, Label, Observation, Sample, SimplexVector};
use crate::nn::{Head, Network, OptimizerKind};
use crate::pipeline::{Aggregation, Classifier, PipelineState};
use crate::training::{
    mwu_baseline, random_committee_baseline, smooth_matching, smooth_weight, strict_matching, weighted_vote,
    Decision, LabelMode, LambdaSchedule, PriorFit, TrainConfig,
};
use crate::tree::DecisionTree;

/// Cluster task generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Orange label 0, orange label 1, blue.
    pub counts: [usize; 3],
    /// Shifts of the orange label-1 and blue clusters.
    pub offsets: [f64; 2],
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec { counts: [500, 500, 1000], offsets: [2.5, 5.0] }
    }
}

/// Content-moderation surrogate settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CMSpec {
    pub samples: usize,
    /// Share of posts in the AAE group.
    pub aae_fraction: f64,
    pub dim: usize,
    /// Distance between the two group means, in noise standard deviations.
    pub group_separation: f64,
    /// Probability that the label disagrees with the linear rule.
    pub label_noise: f64,
}

impl Default for CMSpec {
    fn default() -> Self {
        CMSpec { samples: 25_000, aae_fraction: 0.36, dim: 25, group_separation: 4.0, label_noise: 0.15 }
    }
}

/// Orange points at `mu` (label 0) and `mu + 2.5` (label 1), blue points at
/// `mu + 5` with coin-flip labels. `mu` and the diagonal variances are drawn
/// uniformly from `[0, 1]`.
pub fn gen_cluster_data<R: Rng + ?Sized>(spec: &ClusterSpec, rng: &mut R) -> Result<Dataset> {
    if spec.counts.contains(&0) {
        return Err(Error::config("cluster counts must be positive"));
    }
    let mu: [f64; 2] = [rng.random(), rng.random()];
    let sd: [f64; 2] = [rng.random::<f64>().sqrt(), rng.random::<f64>().sqrt()];
    let mut samples = Vec::with_capacity(spec.counts.iter().sum());
    let parts = [(0.0, groups::ORANGE, Some(0)), (spec.offsets[0], groups::ORANGE, Some(1)), (spec.offsets[1], groups::BLUE, None)];
    for (count, (shift, group, label)) in spec.counts.iter().zip(parts) {
        for _ in 0..*count {
            let x: Vec<f64> = (0..2)
                .map(|d| mu[d] + shift + sd[d] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let y = label.unwrap_or_else(|| Label::from(rng.random_bool(0.5)));
            samples.push(Sample::new(samples.len() as u64, x, group, y)?);
        }
    }
    let data = Dataset { samples, group_names: vec!["orange".into(), "blue".into()] };
    data.validate()?;
    Ok(data)
}

/// Gaussian feature clouds per group with a random linear labelling rule;
/// each label is flipped with probability `label_noise`.
pub fn gen_cm_surrogate<R: Rng + ?Sized>(spec: &CMSpec, rng: &mut R) -> Result<Dataset> {
    if !(spec.aae_fraction > 0.0 && spec.aae_fraction < 1.0) {
        return Err(Error::config(format!("AAE fraction {} outside (0,1)", spec.aae_fraction)));
    }
    if spec.dim == 0 || spec.samples == 0 {
        return Err(Error::config("surrogate needs a positive dimension and sample count"));
    }
    if !(0.0..=0.5).contains(&spec.label_noise) {
        return Err(Error::config(format!("label noise {} outside [0, 0.5]", spec.label_noise)));
    }
    let unit = |rng: &mut R| {
        let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let group_dir = unit(rng);
    let rule = unit(rng);
    let half = spec.group_separation / 2.0;
    let n_aae = (spec.aae_fraction * spec.samples as f64).round() as usize;
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let group = if i < n_aae { groups::AAE } else { groups::NON_AAE };
        let sign = if group == groups::AAE { 1.0 } else { -1.0 };
        let x: Vec<f64> = group_dir
            .iter()
            .map(|g| sign * half * g + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clean = x.iter().zip(&rule).map(|(a, b)| a * b).sum::<f64>() > 0.0;
        let y = Label::from(clean ^ rng.random_bool(spec.label_noise));
        samples.push(Sample::new(i as u64, x, group, y)?);
    }
    samples.shuffle(rng);
    let data = Dataset { samples, group_names: vec!["non-AAE".into(), "AAE".into()] };
    data.validate()?;
    Ok(data)
}

/// Reads a delimited dataset with header `id,group,label,f1..fn`. Group names
/// are mapped to dense ids in order of first appearance unless `known_groups`
/// fixes them.
pub fn read_dataset<R: Read>(reader: R, known_groups: Option<&[String]>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[..3] != ["id", "group", "label"] {
        return Err(Error::Parse { line: 1, message: "header must be id,group,label,f1..fn".into() });
    }
    let dim = cols.len() - 3;
    let mut names: Vec<String> = known_groups.map(|g| g.to_vec()).unwrap_or_default();
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != dim + 3 {
            return Err(parse_err(format!("expected {} fields, got {}", dim + 3, record.len())));
        }
        let id: u64 = record[0].parse().map_err(|e| parse_err(format!("id: {e}")))?;
        let group = match names.iter().position(|n| n == &record[1]) {
            Some(g) => g,
            None if known_groups.is_some() => {
                return Err(Error::config(format!("line {line}: unknown group {:?}", &record[1])))
            }
            None => {
                names.push(record[1].to_string());
                names.len() - 1
            }
        };
        let label: Label = record[2].parse().map_err(|e| parse_err(format!("label: {e}")))?;
        if label > 1 {
            return Err(parse_err(format!("label {label} is not binary")));
        }
        let features = record
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("feature: {e}")))?;
        samples.push(Sample::new(id, features, group, label)?);
    }
    if samples.is_empty() {
        return Err(Error::config("dataset has no rows"));
    }
    let data = Dataset { samples, group_names: names };
    data.validate()?;
    Ok(data)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, None)
}

pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "group".into(), "label".into()];
    header.extend((1..=data.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in &data.samples {
        let mut row = vec![s.id().to_string(), data.group_names[s.group()].clone(), s.true_label.to_string()];
        row.extend(s.features().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Test, prior and stream partitions of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub prior: Vec<Sample>,
    pub stream: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles, holds out `round((1 - train_fraction) n)` samples for testing,
/// then takes `prior_count` unlabelled samples for the prior fit; the rest
/// form the training stream.
pub fn split_dataset<R: Rng + ?Sized>(data: &Dataset, train_fraction: f64, prior_count: usize, rng: &mut R) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0,1]")));
    }
    let n = data.len();
    let n_test = ((1.0 - train_fraction) * n as f64).round() as usize;
    if n_test + prior_count > n {
        return Err(Error::config(format!("{n} samples cannot cover {n_test} test and {prior_count} prior samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let take = |r: &[usize]| r.iter().map(|&i| data.samples[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        test: take(&idx[..n_test]),
        prior: take(&idx[n_test..n_test + prior_count]),
        stream: take(&idx[n_test + prior_count..]),
    })
}

/// Per-feature z-scoring fitted on inputs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0.0;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for x in inputs {
            if sum.is_empty() {
                sum = vec![0.0; x.len()];
                sq = vec![0.0; x.len()];
            }
            if x.len() != sum.len() {
                return Err(Error::Shape { expected: sum.len(), got: x.len() });
            }
            for (i, v) in x.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::config("cannot standardize an empty input set"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, samples: &mut [Sample]) {
        for s in samples {
            for ((v, m), c) in s.obs.features.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / c;
            }
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub overall_acc: f64,
    pub acc_group_0: f64,
    pub acc_group_1: f64,
    pub disparity: f64,
    pub mean_committee_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub overall: f64,
    pub per_group: Vec<f64>,
    pub disparity: f64,
    /// Accuracy of the classifier on its own.
    pub classifier_accuracy: f64,
    /// Share of decision weight (or committee seats) per slot.
    pub deferral_frequency: Vec<f64>,
    pub mean_cost: f64,
    pub trace: Vec<TraceRow>,
}

/// Accuracy counts split by group.
#[derive(Debug, Clone, Default)]
struct Tally {
    hits: Vec<usize>,
    total: Vec<usize>,
}

impl Tally {
    fn new(groups: usize) -> Self {
        Tally { hits: vec![0; groups], total: vec![0; groups] }
    }

    fn add(&mut self, group: usize, hit: bool) {
        if group >= self.total.len() {
            self.hits.resize(group + 1, 0);
            self.total.resize(group + 1, 0);
        }
        self.total[group] += 1;
        self.hits[group] += usize::from(hit);
    }

    fn overall(&self) -> f64 {
        let t: usize = self.total.iter().sum();
        if t == 0 {
            0.0
        } else {
            self.hits.iter().sum::<usize>() as f64 / t as f64
        }
    }

    fn per_group(&self) -> Vec<f64> {
        self.hits
            .iter()
            .zip(&self.total)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect()
    }
}

/// `|acc(z=0) - acc(z=1)|`, or 0 with fewer than two groups.
pub fn disparity(per_group: &[f64]) -> f64 {
    match per_group {
        [a, b, ..] => (a - b).abs(),
        _ => 0.0,
    }
}

/// Windowed accuracy of decisions made during training.
pub fn decision_trace(decisions: &[Decision], truth: &HashMap<u64, Label>, every: usize) -> Result<Vec<TraceRow>> {
    let every = every.max(1);
    let mut rows = Vec::new();
    for chunk in decisions.chunks(every) {
        let mut tally = Tally::new(2);
        let mut cost = 0.0;
        for d in chunk {
            let y = truth.get(&d.id).ok_or_else(|| Error::config(format!("no ground truth for input {}", d.id)))?;
            tally.add(d.group, d.label == *y);
            cost += d.cost;
        }
        let pg = tally.per_group();
        rows.push(TraceRow {
            iter: chunk.last().map_or(0, |d| d.iter),
            overall_acc: tally.overall(),
            acc_group_0: pg[0],
            acc_group_1: pg[1],
            disparity: disparity(&pg),
            mean_committee_cost: cost / chunk.len() as f64,
        });
    }
    Ok(rows)
}

/// Scores a list of decisions against ground truth.
pub fn score_decisions(decisions: &[Decision], truth: &HashMap<u64, Label>, num_groups: usize) -> Result<RunMetrics> {
    let mut tally = Tally::new(num_groups);
    let mut cost = 0.0;
    for d in decisions {
        let y = truth.get(&d.id).ok_or_else(|| Error::config(format!("no ground truth for input {}", d.id)))?;
        tally.add(d.group, d.label == *y);
        cost += d.cost;
    }
    let per_group = tally.per_group();
    Ok(RunMetrics {
        overall: tally.overall(),
        disparity: disparity(&per_group),
        per_group,
        classifier_accuracy: f64::NAN,
        deferral_frequency: Vec::new(),
        mean_cost: cost / decisions.len().max(1) as f64,
        trace: Vec::new(),
    })
}

/// Deferral weights used at evaluation time.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'a> {
    Learned,
    /// Prior mixed in with weight `mu`, as at the end of Smooth-Matching.
    Mixed { prior: &'a dyn Similarity, mu: f64 },
}

/// Accuracy of a trained pipeline on labelled test samples. Committee mode
/// averages over `repetitions` fresh expert answers and committee draws.
pub fn evaluate<R: Rng + ?Sized>(
    state: &PipelineState,
    test: &[Sample],
    experts: &mut dyn Annotator,
    mode: Aggregation,
    policy: EvalPolicy<'_>,
    repetitions: usize,
    rng: &mut R,
) -> Result<RunMetrics> {
    if test.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let groups = test.iter().map(|s| s.group()).max().unwrap_or(0) + 1;
    let mut tally = Tally::new(groups.max(2));
    let mut clf = Tally::new(groups.max(2));
    let mut freq = vec![0.0; state.num_slots()];
    let mut cost = 0.0;
    let mut decisions = 0usize;
    let mut weights: Vec<SimplexVector> = Vec::with_capacity(test.len());
    for s in test {
        let learned = state.deferral(&s.obs)?;
        weights.push(match policy {
            EvalPolicy::Learned => learned,
            EvalPolicy::Mixed { prior, mu } => prior.expert_prior(&s.obs)?.mix(&learned, mu)?,
        });
        let f = state.classifier.predict_prob(s.features())?;
        clf.add(s.group(), Label::from(f > 0.5) == s.true_label);
    }
    for _ in 0..repetitions.max(1) {
        for (s, d) in test.iter().zip(&weights) {
            let y_e = state.prediction_vector(&s.obs, experts)?;
            let costs = experts.costs(&s.obs);
            let (label, c, members) = state.decide(d, &y_e, costs.as_slice(), mode, rng)?;
            tally.add(s.group(), label == s.true_label);
            cost += c;
            decisions += 1;
            if members.is_empty() {
                freq.iter_mut().zip(d.as_slice()).for_each(|(f, w)| *f += w);
            } else {
                let share = 1.0 / members.len() as f64;
                members.iter().for_each(|&i| freq[i] += share);
            }
        }
    }
    freq.iter_mut().for_each(|f| *f /= decisions as f64);
    let per_group = tally.per_group();
    Ok(RunMetrics {
        overall: tally.overall(),
        disparity: disparity(&per_group),
        per_group,
        classifier_accuracy: clf.overall(),
        deferral_frequency: freq,
        mean_cost: cost / decisions as f64,
        trace: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Cluster,
    CmSurrogate,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Task::Cluster),
            "cm-surrogate" => Ok(Task::CmSurrogate),
            _ => Err(Error::config(format!("unknown task {s:?} (expected cluster or cm-surrogate)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Strict,
    Smooth,
    RandomCommittee,
    Mwu,
    /// Strict-Matching trained on ground truth.
    Oracle,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Algorithm::Strict),
            "smooth" => Ok(Algorithm::Smooth),
            "random-committee" => Ok(Algorithm::RandomCommittee),
            "mwu" => Ok(Algorithm::Mwu),
            "oracle" => Ok(Algorithm::Oracle),
            _ => Err(Error::config(format!(
                "unknown algorithm {s:?} (expected strict, smooth, random-committee, mwu or oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Cluster(ClusterSpec),
    CmSurrogate(CMSpec),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PanelSpec {
    Cluster,
    ContentModeration,
    Biased { m: usize, alpha: f64 },
    Custom { experts: Vec<CustomExpert> },
}

impl PanelSpec {
    pub fn build(&self) -> Result<ExpertPanel> {
        match *self {
            PanelSpec::Cluster => Ok(make_cluster_experts()),
            PanelSpec::ContentModeration => Ok(make_cm_experts()),
            PanelSpec::Biased { m, alpha } => biased_panel(m, alpha),
            PanelSpec::Custom { ref experts } => {
                let models = experts
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let acc = e
                            .accuracy
                            .iter()
                            .map(|(g, a)| {
                                g.parse::<usize>()
                                    .map(|g| (g, *a))
                                    .map_err(|_| Error::config(format!("group key {g:?} is not an integer")))
                            })
                            .collect::<Result<BTreeMap<_, _>>>()?;
                        let id = e.id.clone().unwrap_or_else(|| format!("e{}", i + 1));
                        ExpertModel::new(id, acc, Cost::Constant(e.cost))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ExpertPanel::new(models)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DSimSpec {
    Cluster { s: f64 },
    ContentModeration { n_s: usize },
    Uniform,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassifierSpec {
    Tree { depth: usize },
    Net { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<f64>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub task: Task,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub repetitions: usize,
    pub data: DataSource,
    pub train_fraction: f64,
    pub prior_count: usize,
    /// Z-score features with statistics of the training inputs.
    pub standardize: bool,
    pub panel: PanelSpec,
    pub dsim: DSimSpec,
    pub classifier_entry: f64,
    pub classifier: ClassifierSpec,
    pub deferrer_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub mwu_eta: f64,
    /// Committee size of the random-committee baseline.
    pub baseline_k: usize,
    pub eval_repetitions: usize,
    /// Evaluate Smooth-Matching with the prior still mixed in at its final
    /// weight instead of the learned deferrer alone.
    pub eval_prior_mix: bool,
    pub trace_every: usize,
    pub sweep: Option<SweepSpec>,
}

impl Settings {
    /// Defaults of each task.
    pub fn defaults(task: Task) -> Self {
        match task {
            Task::Cluster => Settings {
                task,
                algorithm: Algorithm::Strict,
                seed: 0,
                repetitions: 10,
                data: DataSource::Cluster(ClusterSpec::default()),
                train_fraction: 0.8,
                prior_count: 500,
                standardize: true,
                panel: PanelSpec::Cluster,
                dsim: DSimSpec::Cluster { s: 0.4 },
                classifier_entry: CLASSIFIER_PRIOR,
                classifier: ClassifierSpec::Tree { depth: 4 },
                deferrer_hidden: vec![16, 8],
                train: TrainConfig {
                    alpha: 1.0,
                    lr: 0.0075,
                    optimizer: OptimizerKind::Sgd,
                    lambda: LambdaSchedule::Linear { per_update: 0.01 },
                    batch_size: 10,
                    aggregation: Aggregation::Full,
                    t_d: 500.0,
                    epochs: 1,
                    label_mode: LabelMode::Aggregated,
                    prior: PriorFit { optimizer: OptimizerKind::Sgd, lr: 0.001, epochs: 500, batch_size: 1 },
                },
                mwu_eta: 0.1,
                baseline_k: 5,
                eval_repetitions: 1,
                eval_prior_mix: false,
                trace_every: 100,
                sweep: None,
            },
            Task::CmSurrogate => Settings {
                task,
                algorithm: Algorithm::Strict,
                seed: 0,
                repetitions: 20,
                data: DataSource::CmSurrogate(CMSpec::default()),
                train_fraction: 0.8,
                prior_count: 1000,
                standardize: true,
                panel: PanelSpec::ContentModeration,
                dsim: DSimSpec::ContentModeration { n_s: 2 },
                classifier_entry: CLASSIFIER_PRIOR,
                classifier: ClassifierSpec::Net { hidden: vec![64, 32, 16] },
                deferrer_hidden: vec![64, 32, 16],
                train: TrainConfig {
                    alpha: 1.0,
                    lr: 0.01,
                    optimizer: OptimizerKind::Sgd,
                    lambda: LambdaSchedule::Linear { per_update: 0.01 },
                    batch_size: 100,
                    aggregation: Aggregation::Committee { k: 5 },
                    t_d: 10_000.0,
                    epochs: 1,
                    label_mode: LabelMode::Aggregated,
                    prior: PriorFit { optimizer: OptimizerKind::adam(), lr: 1e-4, epochs: 100, batch_size: 100 },
                },
                mwu_eta: 0.1,
                baseline_k: 5,
                eval_repetitions: 5,
                eval_prior_mix: false,
                trace_every: 1000,
                sweep: None,
            },
        }
    }

    /// Resolves a parsed configuration against the task defaults.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let task: Task = cfg.task.as_deref().ok_or_else(|| Error::config("missing task"))?.parse()?;
        let mut s = Settings::defaults(task);
        if let Some(a) = &cfg.algorithm {
            s.algorithm = a.parse()?;
        }
        if let Some(seed) = cfg.seed {
            s.seed = seed;
        }
        let d = &cfg.data;
        if let Some(path) = &d.path {
            s.data = DataSource::File { path: path.clone() };
        }
        match &mut s.data {
            DataSource::Cluster(spec) => {
                if let Some(c) = d.counts {
                    spec.counts = c;
                }
            }
            DataSource::CmSurrogate(spec) => {
                set(&mut spec.samples, d.samples);
                set(&mut spec.aae_fraction, d.aae_fraction);
                set(&mut spec.dim, d.dim);
                set(&mut spec.group_separation, d.group_separation);
                set(&mut spec.label_noise, d.label_noise);
            }
            DataSource::File { .. } => {}
        }
        set(&mut s.train_fraction, d.train_fraction);
        set(&mut s.prior_count, d.prior_count);
        set(&mut s.standardize, d.standardize);

        let e = &cfg.experts;
        if let Some(kind) = &e.panel {
            s.panel = match kind.as_str() {
                "cluster" => PanelSpec::Cluster,
                "content-moderation" => PanelSpec::ContentModeration,
                "custom" => PanelSpec::Custom { experts: e.custom.clone() },
                "biased" => PanelSpec::Biased {
                    m: e.m.ok_or_else(|| Error::config("biased panel needs experts.m"))?,
                    alpha: e.alpha.ok_or_else(|| Error::config("biased panel needs experts.alpha"))?,
                },
                other => return Err(Error::config(format!("unknown panel {other:?}"))),
            };
        }

        let ds = &cfg.dsim;
        if let Some(kind) = &ds.kind {
            s.dsim = match kind.as_str() {
                "cluster" => DSimSpec::Cluster { s: 0.4 },
                "content-moderation" => DSimSpec::ContentModeration { n_s: 2 },
                "uniform" => DSimSpec::Uniform,
                "file" => DSimSpec::File {
                    path: ds.path.clone().ok_or_else(|| Error::config("dsim kind file needs dsim.path"))?,
                },
                other => return Err(Error::config(format!("unknown dsim kind {other:?}"))),
            };
        }
        match &mut s.dsim {
            DSimSpec::Cluster { s: strength } => set(strength, ds.s),
            DSimSpec::ContentModeration { n_s } => set(n_s, ds.n_s),
            _ => {}
        }
        set(&mut s.classifier_entry, ds.classifier_entry);

        let p = &cfg.pipeline;
        if let Some(agg) = &p.aggregation {
            s.train.aggregation = match agg.as_str() {
                "full" => Aggregation::Full,
                "committee" => Aggregation::Committee { k: p.k.unwrap_or(5) },
                other => return Err(Error::config(format!("unknown aggregation {other:?}"))),
            };
        } else if let (Some(k), Aggregation::Committee { .. }) = (p.k, s.train.aggregation) {
            s.train.aggregation = Aggregation::Committee { k };
        }
        if let Some(kind) = &p.classifier {
            s.classifier = match kind.as_str() {
                "tree" => ClassifierSpec::Tree { depth: p.tree_depth.unwrap_or(4) },
                "net" => ClassifierSpec::Net { hidden: p.classifier_hidden.clone().unwrap_or(vec![64, 32, 16]) },
                other => return Err(Error::config(format!("unknown classifier {other:?}"))),
            };
        } else {
            match &mut s.classifier {
                ClassifierSpec::Tree { depth } => set(depth, p.tree_depth),
                ClassifierSpec::Net { hidden } => set(hidden, p.classifier_hidden.clone()),
            }
        }
        set(&mut s.deferrer_hidden, p.deferrer_hidden.clone());

        let t = &cfg.training;
        set(&mut s.train.alpha, t.alpha);
        set(&mut s.train.lr, t.lr);
        set(&mut s.train.batch_size, t.batch_size);
        set(&mut s.train.t_d, t.t_d);
        set(&mut s.train.epochs, t.epochs);
        if let Some(o) = &t.optimizer {
            s.train.optimizer = parse_optimizer(o)?;
        }
        match (t.lambda, t.lambda_per_update) {
            (Some(_), Some(_)) => return Err(Error::config("set either training.lambda or training.lambda_per_update")),
            (Some(value), None) => s.train.lambda = LambdaSchedule::Constant { value },
            (None, Some(per_update)) => s.train.lambda = LambdaSchedule::Linear { per_update },
            (None, None) => {}
        }
        if let Some(o) = &t.prior_optimizer {
            s.train.prior.optimizer = parse_optimizer(o)?;
        }
        set(&mut s.train.prior.lr, t.prior_lr);
        set(&mut s.train.prior.epochs, t.prior_epochs);
        set(&mut s.train.prior.batch_size, t.prior_batch_size);
        set(&mut s.mwu_eta, t.mwu_eta);
        if s.algorithm == Algorithm::Oracle {
            s.train.label_mode = LabelMode::Oracle;
        }

        let x = &cfg.experiments;
        set(&mut s.repetitions, x.repetitions);
        set(&mut s.eval_repetitions, x.eval_repetitions);
        set(&mut s.eval_prior_mix, x.eval_prior_mix);
        set(&mut s.trace_every, x.trace_every);
        set(&mut s.baseline_k, x.baseline_k);
        if let Some(sw) = &x.sweep {
            s.sweep = Some(SweepSpec { parameter: sw.parameter.clone(), values: sw.values.clone() });
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if self.baseline_k == 0 {
            return Err(Error::config("baseline committee size must be at least 1"));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(Error::config("sweep grid is empty"));
            }
            let mut probe = self.clone();
            apply_parameter(&mut probe, &sw.parameter, sw.values[0])?;
        }
        Ok(())
    }

    pub fn committee_k(&self) -> usize {
        match self.train.aggregation {
            Aggregation::Committee { k } => k,
            Aggregation::Full => 1,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(Error::config(format!("unknown optimizer {other:?}"))),
    }
}

/// Sets one named parameter; used by sweeps.
pub fn apply_parameter(s: &mut Settings, name: &str, value: f64) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::config(format!("{name} needs a non-negative integer, got {v}")))
        }
    };
    match name {
        "dsim.s" => s.dsim = DSimSpec::Cluster { s: value },
        "dsim.n_s" => s.dsim = DSimSpec::ContentModeration { n_s: as_count(value)? },
        "dsim.classifier_entry" => s.classifier_entry = value,
        "training.t_d" => s.train.t_d = value,
        "training.alpha" => s.train.alpha = value,
        "training.lr" => s.train.lr = value,
        "data.aae_fraction" => match &mut s.data {
            DataSource::CmSurrogate(spec) => spec.aae_fraction = value,
            _ => return Err(Error::config("data.aae_fraction applies to the cm-surrogate task only")),
        },
        "experts.alpha" => match &mut s.panel {
            PanelSpec::Biased { alpha, .. } => *alpha = value,
            _ => return Err(Error::config("experts.alpha applies to the biased panel only")),
        },
        "pipeline.k" => s.train.aggregation = Aggregation::Committee { k: as_count(value)? },
        other => return Err(Error::config(format!("unknown sweep parameter {other:?}"))),
    }
    Ok(())
}

/// Outcome of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub repetition: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub updates: usize,
}

pub fn build_dataset(settings: &Settings, seeds: &SeedStreams) -> Result<Dataset> {
    let mut rng = seeds.rng(Stream::Data);
    match &settings.data {
        DataSource::Cluster(spec) => gen_cluster_data(spec, &mut rng),
        DataSource::CmSurrogate(spec) => gen_cm_surrogate(spec, &mut rng),
        DataSource::File { path } => load_embeddings(path),
    }
}

fn build_dsim(settings: &Settings, num_slots: usize, num_groups: usize, seeds: &SeedStreams) -> Result<DSimTable> {
    let table = match &settings.dsim {
        DSimSpec::Cluster { s } => {
            let mut t = make_cluster_dsim(*s)?.rows().to_vec();
            t.last_mut().unwrap().fill(settings.classifier_entry);
            DSimTable::new(t)?
        }
        DSimSpec::ContentModeration { n_s } => {
            make_cm_dsim(*n_s, settings.classifier_entry, &mut seeds.rng(Stream::Dsim))?
        }
        DSimSpec::Uniform => DSimTable::uniform(num_slots, num_groups),
        DSimSpec::File { path } => DSimTable::from_text(&std::fs::read_to_string(path)?)?,
    };
    if table.num_slots() != num_slots {
        return Err(Error::Shape { expected: num_slots, got: table.num_slots() });
    }
    Ok(table)
}

fn build_state(settings: &Settings, dim: usize, num_experts: usize, seeds: &SeedStreams) -> Result<PipelineState> {
    let classifier = match &settings.classifier {
        ClassifierSpec::Tree { depth } => Classifier::Tree(DecisionTree::unfitted(*depth)),
        ClassifierSpec::Net { hidden } => {
            let sizes: Vec<usize> = std::iter::once(dim).chain(hidden.iter().copied()).chain([1]).collect();
            Classifier::Net(Network::new(&sizes, Head::Sigmoid, &mut seeds.rng(Stream::ClassifierInit))?)
        }
    };
    let sizes: Vec<usize> = std::iter::once(dim)
        .chain(settings.deferrer_hidden.iter().copied())
        .chain([num_experts + 1])
        .collect();
    let deferrer = Network::new(&sizes, Head::Softmax, &mut seeds.rng(Stream::DeferrerInit))?;
    let k = settings.committee_k().min(num_experts + 1);
    PipelineState::new(classifier, deferrer, num_experts, k)
}

fn observations(samples: &[Sample]) -> Vec<Observation> {
    samples.iter().map(|s| s.obs.clone()).collect()
}

fn truth_map(samples: &[Sample]) -> HashMap<u64, Label> {
    samples.iter().map(|s| (s.id(), s.true_label)).collect()
}

/// One complete run: data, split, training and test evaluation.
pub fn run_once(settings: &Settings, repetition: usize) -> Result<RunOutcome> {
    let seeds = SeedStreams::new(settings.seed).repetition(repetition as u64);
    let data = build_dataset(settings, &seeds)?;
    let mut split = split_dataset(&data, settings.train_fraction, settings.prior_count, &mut seeds.rng(Stream::Split))?;
    if settings.standardize {
        let scaler = Standardizer::fit(split.prior.iter().chain(&split.stream).map(|s| s.features()))?;
        scaler.apply(&mut split.prior);
        scaler.apply(&mut split.stream);
        scaler.apply(&mut split.test);
    }
    if split.test.is_empty() {
        return Err(Error::config("test partition is empty"));
    }
    let panel = settings.panel.build()?;
    let num_groups = data.num_groups().max(2);
    let table = build_dsim(settings, panel.num_slots(), num_groups, &seeds)?;
    let state = build_state(settings, data.dim(), panel.len(), &seeds)?;
    let stream = observations(&split.stream);
    let prior_set = observations(&split.prior);
    let stream_truth = truth_map(&split.stream);
    let mut train_experts = PanelAnnotator::new(panel.clone(), &split.stream, seeds.derive(Stream::Experts));
    let mut test_experts = PanelAnnotator::new(panel, &split.test, seeds.derive(Stream::Evaluation));
    let mut train_rng = seeds.rng(Stream::Committee);
    let mut eval_rng = seeds.rng(Stream::Evaluation);
    let mode = settings.train.aggregation;
    let reps = settings.eval_repetitions;

    let (mut metrics, decisions, updates) = match settings.algorithm {
        Algorithm::Strict | Algorithm::Oracle => {
            let mut cfg = settings.train.clone();
            if settings.algorithm == Algorithm::Oracle {
                cfg.label_mode = LabelMode::Oracle;
            }
            let (trained, out) =
                strict_matching(state, &prior_set, &stream, &mut train_experts, &table, &cfg, &mut train_rng)?;
            let m = evaluate(&trained, &split.test, &mut test_experts, mode, EvalPolicy::Learned, reps, &mut eval_rng)?;
            (m, out.decisions, out.updates)
        }
        Algorithm::Smooth => {
            let (trained, out) =
                smooth_matching(state, &stream, &mut train_experts, &table, &settings.train, &mut train_rng)?;
            let policy = if settings.eval_prior_mix {
                EvalPolicy::Mixed { prior: &table, mu: smooth_weight(out.decisions.len(), settings.train.t_d) }
            } else {
                EvalPolicy::Learned
            };
            let m = evaluate(&trained, &split.test, &mut test_experts, mode, policy, reps, &mut eval_rng)?;
            (m, out.decisions, out.updates)
        }
        Algorithm::RandomCommittee => {
            let test_obs = observations(&split.test);
            let mut decisions = Vec::new();
            for _ in 0..reps.max(1) {
                decisions.extend(random_committee_baseline(
                    &test_obs,
                    &mut test_experts,
                    settings.baseline_k,
                    &mut eval_rng,
                )?);
            }
            let m = score_decisions(&decisions, &truth_map(&split.test), num_groups)?;
            (m, Vec::new(), 0)
        }
        Algorithm::Mwu => {
            let out = mwu_baseline(&stream, &mut train_experts, settings.mwu_eta, settings.train.label_mode)?;
            let w = out.weights.last().cloned().unwrap_or_default();
            let test_obs = observations(&split.test);
            let mut decisions = Vec::new();
            for _ in 0..reps.max(1) {
                for (t, obs) in test_obs.iter().enumerate() {
                    let votes = test_experts.votes(obs)?;
                    let costs = test_experts.costs(obs);
                    let cost: f64 = w.iter().zip(costs.as_slice()).map(|(a, c)| a * c).sum();
                    decisions.push(Decision {
                        id: obs.id,
                        group: obs.group,
                        label: weighted_vote(&w, &votes)?,
                        cost,
                        iter: t,
                        classifier_weight: 0.0,
                    });
                }
            }
            let mut m = score_decisions(&decisions, &truth_map(&split.test), num_groups)?;
            m.deferral_frequency = w;
            (m, out.decisions, 0)
        }
    };
    metrics.trace = decision_trace(&decisions, &stream_truth, settings.trace_every)?;
    Ok(RunOutcome { repetition, seed: seeds.seed(), metrics, updates })
}

/// Runs every repetition of one setting.
pub fn run_repetitions(settings: &Settings) -> Result<Vec<RunOutcome>> {
    (0..settings.repetitions)
        .into_par_iter()
        .map(|r| run_once(settings, r))
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let shift = values[0];
        let centred = values.iter().map(|v| v - shift).sum::<f64>() / n;
        let var = if values.len() < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - shift - centred).powi(2)).sum::<f64>() / (n - 1.0)
        };
        Stat { mean: shift + centred, std: var.sqrt() }
    }
}

/// Aggregate over repetitions of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub parameter: Option<String>,
    pub value: Option<f64>,
    pub repetitions: usize,
    pub overall: Stat,
    pub acc_group_0: Stat,
    pub acc_group_1: Stat,
    pub disparity: Stat,
    pub classifier_accuracy: Stat,
    pub mean_cost: Stat,
}

pub fn summarize(runs: &[RunOutcome], parameter: Option<&str>, value: Option<f64>) -> Summary {
    let pick = |f: &dyn Fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Summary {
        parameter: parameter.map(String::from),
        value,
        repetitions: runs.len(),
        overall: pick(&|m| m.overall),
        acc_group_0: pick(&|m| m.per_group.first().copied().unwrap_or(f64::NAN)),
        acc_group_1: pick(&|m| m.per_group.get(1).copied().unwrap_or(f64::NAN)),
        disparity: pick(&|m| m.disparity),
        classifier_accuracy: pick(&|m| m.classifier_accuracy),
        mean_cost: pick(&|m| m.mean_cost),
    }
}

/// Grid point result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub summary: Summary,
    pub runs: Vec<RunOutcome>,
}

/// Runs every grid point for `settings.repetitions` repetitions. Each
/// (point, repetition) pair gets its own seed.
pub fn run_sweep(settings: &Settings) -> Result<Vec<SweepPoint>> {
    let Some(sweep) = &settings.sweep else {
        let runs = run_repetitions(settings)?;
        return Ok(vec![SweepPoint { summary: summarize(&runs, None, None), runs }]);
    };
    if sweep.values.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut points = Vec::with_capacity(sweep.values.len());
    for (i, &v) in sweep.values.iter().enumerate() {
        let mut s = settings.clone();
        apply_parameter(&mut s, &sweep.parameter, v)?;
        s.seed = SeedStreams::new(settings.seed).grid_point(i as u64).seed();
        points.push(s);
    }
    let jobs: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|p| (0..settings.repetitions).map(move |r| (p, r))).collect();
    let results: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(p, r)| run_once(&points[p], r))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(points.len());
    for (p, chunk) in results.chunks(settings.repetitions).enumerate() {
        let runs = chunk.to_vec();
        out.push(SweepPoint {
            summary: summarize(&runs, Some(&sweep.parameter), Some(sweep.values[p])),
            runs,
        });
    }
    Ok(out)
}

/// Writes the per-iteration trace as CSV.
pub fn write_trace<W: Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Flat CSV header and row for a [`Summary`].
pub fn summary_header() -> Vec<&'static str> {
    vec![
        "parameter", "value", "repetitions", "overall_mean", "overall_std", "acc_group_0_mean", "acc_group_0_std",
        "acc_group_1_mean", "acc_group_1_std", "disparity_mean", "disparity_std", "classifier_accuracy_mean",
        "classifier_accuracy_std", "mean_cost_mean", "mean_cost_std",
    ]
}

pub fn summary_row(s: &Summary) -> Vec<String> {
    let mut row = vec![
        s.parameter.clone().unwrap_or_default(),
        s.value.map(|v| v.to_string()).unwrap_or_default(),
        s.repetitions.to_string(),
    ];
    for st in [s.overall, s.acc_group_0, s.acc_group_1, s.disparity, s.classifier_accuracy, s.mean_cost] {
        row.push(st.mean.to_string());
        row.push(st.std.to_string());
    }
    row
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
