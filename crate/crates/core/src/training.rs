//! Losses, the joint gradient update, prior fitting, the two matching
//! algorithms and the baselines.
//!
//! Everything here works on [`Observation`]s and an [`Annotator`]. The only
//! training signal is the pipeline's own aggregated decision, unless
//! [`LabelMode::Oracle`] is selected explicitly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsim::Similarity;
use crate::error::{Error, Result};
use crate::experts::Annotator;
use crate::model::{CostVector, Label, Observation, PredictionVector, SimplexVector};
use crate::nn::{Gradients, Network, OptimizerKind, OptimizerState};
use crate::pipeline::{aggregate_full, sigma, Aggregation, Classifier, PipelineState};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside every log-loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Cost multiplier as a function of the number of updates made so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// `lambda = t * per_update`.
    Linear { per_update: f64 },
}

impl LambdaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::Linear { per_update } => per_update * t as f64,
        }
    }
}

/// Where training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// The pipeline's own decision.
    #[default]
    Aggregated,
    /// Ground truth from the annotator; ablation only.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorFit {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Passes over the unlabelled set.
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: LambdaSchedule,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub t_d: f64,
    /// Passes over the training stream.
    pub epochs: usize,
    pub label_mode: LabelMode,
    pub prior: PriorFit,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.prior.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.t_d >= 0.0) {
            return Err(Error::config(format!("T_d must be >= 0, got {}", self.t_d)));
        }
        if let Aggregation::Committee { k: 0 } = self.aggregation {
            return Err(Error::config("committee size must be at least 1"));
        }
        Ok(())
    }
}

/// Clamped binary log-loss.
pub fn classifier_loss(f_out: f64, y: Label) -> f64 {
    let p = f_out.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`classifier_loss`] with respect to `f_out`.
fn classifier_loss_grad(f_out: f64, y: Label) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&f_out) {
        return 0.0;
    }
    (f_out - f64::from(y)) / (f_out * (1.0 - f_out))
}

/// Log-loss of the soft pipeline prediction plus `lambda * (D . c)`.
pub fn deferral_loss(d: &SimplexVector, y_e: &PredictionVector, y: Label, c: &CostVector, lambda: f64) -> Result<f64> {
    if d.len() != y_e.len() || d.len() != c.len() {
        return Err(Error::Shape { expected: y_e.len(), got: d.len() });
    }
    let y_hat = sigma(d.dot(y_e.as_slice()));
    Ok(classifier_loss(y_hat, y) + lambda * d.dot(c.as_slice()))
}

/// One buffered training example.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub obs: Observation,
    pub label: Label,
    /// Expert votes; the classifier entry is refreshed at update time.
    pub y_e: PredictionVector,
    pub costs: CostVector,
}

/// Mean over the batch of `L_f + alpha * L_D` under the current state.
pub fn combined_loss(batch: &[BatchItem], state: &PipelineState, alpha: f64, lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("loss of an empty batch"));
    }
    let mut total = 0.0;
    for item in batch {
        let f = state.classifier.predict_prob(&item.obs.features)?;
        let d = state.deferral(&item.obs)?;
        let y_e = item.y_e.with_classifier_prob(f);
        total += classifier_loss(f, item.label) + alpha * deferral_loss(&d, &y_e, item.label, &item.costs, lambda)?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradients of [`combined_loss`] with respect to the deferrer and, for a
/// network classifier, the classifier.
pub fn loss_gradients(
    batch: &[BatchItem],
    state: &PipelineState,
    alpha: f64,
    lambda: f64,
) -> Result<(Gradients, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::config("gradient of an empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut g_def = Gradients::zeros_like(&state.deferrer);
    let mut g_clf = match &state.classifier {
        Classifier::Net(net) => Some(Gradients::zeros_like(net)),
        Classifier::Tree(_) => None,
    };
    let m = state.num_slots();
    let mut upstream = vec![0.0; m];
    for item in batch {
        let x = &item.obs.features;
        let clf_trace = match &state.classifier {
            Classifier::Net(net) => Some(net.forward_trace(x)?),
            Classifier::Tree(_) => None,
        };
        let f = match &clf_trace {
            Some(t) => t.output[0],
            None => state.classifier.predict_prob(x)?,
        };
        let y_e = item.y_e.with_classifier_prob(f);
        let def_trace = state.deferrer.forward_trace(x)?;
        let d = &def_trace.output;
        let s: f64 = d.iter().zip(y_e.as_slice()).map(|(a, b)| a * b).sum();
        let y_hat = sigma(s);
        // d/ds of the log-loss of sigma(s); zero when the clamp is active.
        let ds = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&y_hat) {
            2.0 * (y_hat - f64::from(item.label))
        } else {
            0.0
        };
        for (i, u) in upstream.iter_mut().enumerate() {
            *u = alpha * (ds * y_e.as_slice()[i] + lambda * item.costs.as_slice()[i]);
        }
        state.deferrer.accumulate_backward(&def_trace, &upstream, scale, &mut g_def)?;
        if let (Classifier::Net(net), Some(trace), Some(g)) = (&state.classifier, &clf_trace, g_clf.as_mut()) {
            let up = classifier_loss_grad(f, item.label) + alpha * ds * d[m - 1];
            net.accumulate_backward(trace, &[up], scale, g)?;
        }
    }
    Ok((g_def, g_clf))
}

/// Optimizer state carried across calls to [`update_model`].
#[derive(Debug, Clone)]
pub struct Learner {
    pub deferrer_opt: OptimizerState,
    pub classifier_opt: OptimizerState,
    /// Every `(x, label)` pair seen so far, used to refit a tree classifier.
    memory: Vec<(Vec<f64>, Label)>,
}

impl Learner {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        Ok(Learner {
            deferrer_opt: OptimizerState::new(kind, lr)?,
            classifier_opt: OptimizerState::new(kind, lr)?,
            memory: Vec::new(),
        })
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }
}

/// One joint step: gradient descent on the deferrer, and a gradient step (for
/// a network) or a refit on every label seen so far (for a tree) on the
/// classifier. The classifier gradient is taken before the deferrer moves.
pub fn update_model(
    state: &mut PipelineState,
    batch: &[BatchItem],
    alpha: f64,
    lambda: f64,
    learner: &mut Learner,
) -> Result<()> {
    let (g_def, g_clf) = loss_gradients(batch, state, alpha, lambda)?;
    if !g_def.all_finite() || g_clf.as_ref().is_some_and(|g| !g.all_finite()) {
        return Err(Error::Numeric("non-finite gradient in update".into()));
    }
    learner.deferrer_opt.step(&mut state.deferrer, &g_def)?;
    match (&mut state.classifier, g_clf) {
        (Classifier::Net(net), Some(g)) => learner.classifier_opt.step(net, &g)?,
        (Classifier::Tree(tree), _) => {
            learner.memory.extend(batch.iter().map(|b| (b.obs.features.clone(), b.label)));
            let xs: Vec<&[f64]> = learner.memory.iter().map(|(x, _)| x.as_slice()).collect();
            let ys: Vec<Label> = learner.memory.iter().map(|(_, y)| *y).collect();
            tree.fit(&xs, &ys)?;
        }
        (Classifier::Net(_), None) => unreachable!("network classifier always has gradients"),
    }
    Ok(())
}

/// Regresses the deferrer's softmax output onto the similarity prior by
/// squared error.
pub fn fit_prior_deferrer<R: Rng + ?Sized>(
    mut deferrer: Network,
    unlabeled: &[Observation],
    similarity: &dyn Similarity,
    settings: &PriorFit,
    rng: &mut R,
) -> Result<Network> {
    if unlabeled.is_empty() {
        return Err(Error::config("prior fit needs at least one unlabelled input"));
    }
    if similarity.num_slots() != deferrer.output_dim() {
        return Err(Error::Shape { expected: deferrer.output_dim(), got: similarity.num_slots() });
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let targets: Vec<SimplexVector> = unlabeled.iter().map(|o| similarity.prior(o)).collect::<Result<_>>()?;
    let mut opt = OptimizerState::new(settings.optimizer, settings.lr)?;
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut upstream = vec![0.0; deferrer.output_dim()];
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(settings.batch_size) {
            let mut grads = Gradients::zeros_like(&deferrer);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let trace = deferrer.forward_trace(&unlabeled[i].features)?;
                for ((u, p), t) in upstream.iter_mut().zip(&trace.output).zip(targets[i].as_slice()) {
                    *u = 2.0 * (p - t);
                }
                deferrer.accumulate_backward(&trace, &upstream, scale, &mut grads)?;
            }
            opt.step(&mut deferrer, &grads)?;
        }
    }
    Ok(deferrer)
}

/// Mean squared error between the deferrer output and the prior.
pub fn prior_fit_error(deferrer: &Network, inputs: &[Observation], similarity: &dyn Similarity) -> Result<f64> {
    let mut total = 0.0;
    for o in inputs {
        let p = deferrer.forward(&o.features)?;
        let t = similarity.prior(o)?;
        total += p.iter().zip(t.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// One pipeline decision made while training. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub id: u64,
    pub group: usize,
    pub label: Label,
    pub cost: f64,
    /// Sample index across all epochs.
    pub iter: usize,
    /// Weight the deferral distribution put on the classifier slot.
    pub classifier_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub decisions: Vec<Decision>,
    pub updates: usize,
}

/// How the learned deferrer is combined with the prior during training.
#[derive(Clone, Copy)]
pub enum Matching<'a> {
    /// Use the learned deferrer as-is.
    Strict,
    /// Mix in the prior with weight `T_d / (t + T_d)`.
    Smooth { prior: &'a dyn Similarity, t_d: f64 },
}

/// Prior mixing weight at sample index `t`.
pub fn smooth_weight(t: usize, t_d: f64) -> f64 {
    if t_d == 0.0 {
        0.0
    } else {
        t_d / (t as f64 + t_d)
    }
}

/// Online loop shared by both matching algorithms: decide, buffer, and
/// update every `batch_size` samples.
pub fn train_online<R: Rng + ?Sized>(
    state: &mut PipelineState,
    stream: &[Observation],
    experts: &mut dyn Annotator,
    matching: Matching<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut learner = Learner::new(cfg.optimizer, cfg.lr)?;
    let mut buffer: Vec<BatchItem> = Vec::with_capacity(cfg.batch_size);
    let mut decisions = Vec::with_capacity(stream.len() * cfg.epochs);
    let mut updates = 0;
    let mut t = 0;
    for _ in 0..cfg.epochs {
        for obs in stream {
            let y_e = state.prediction_vector(obs, experts)?;
            let learned = state.deferral(obs)?;
            let d = match matching {
                Matching::Strict => learned,
                Matching::Smooth { prior, t_d } => prior.expert_prior(obs)?.mix(&learned, smooth_weight(t, t_d))?,
            };
            let costs = experts.costs(obs);
            let (decided, cost, _) = state.decide(&d, &y_e, costs.as_slice(), cfg.aggregation, rng)?;
            let label = match cfg.label_mode {
                LabelMode::Aggregated => decided,
                LabelMode::Oracle => experts.reveal(obs)?,
            };
            decisions.push(Decision {
                id: obs.id,
                group: obs.group,
                label: decided,
                cost,
                iter: t,
                classifier_weight: d[d.len() - 1],
            });
            buffer.push(BatchItem { obs: obs.clone(), label, y_e, costs });
            t += 1;
            if buffer.len() == cfg.batch_size {
                update_model(state, &buffer, cfg.alpha, cfg.lambda.at(updates), &mut learner)?;
                updates += 1;
                buffer.clear();
            }
        }
    }
    Ok(TrainOutput { decisions, updates })
}

/// Strict-Matching: fit the deferrer to the prior on unlabelled inputs, then
/// train on aggregated decisions.
pub fn strict_matching<R: Rng + ?Sized>(
    mut state: PipelineState,
    unlabeled: &[Observation],
    stream: &[Observation],
    experts: &mut dyn Annotator,
    similarity: &dyn Similarity,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PipelineState, TrainOutput)> {
    cfg.validate()?;
    state.deferrer = fit_prior_deferrer(state.deferrer, unlabeled, similarity, &cfg.prior, rng)?;
    let out = train_online(&mut state, stream, experts, Matching::Strict, cfg, rng)?;
    Ok((state, out))
}

/// Smooth-Matching: start from the given (typically random) deferrer and mix
/// the prior in with a decaying weight.
pub fn smooth_matching<R: Rng + ?Sized>(
    mut state: PipelineState,
    stream: &[Observation],
    experts: &mut dyn Annotator,
    similarity: &dyn Similarity,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PipelineState, TrainOutput)> {
    let matching = Matching::Smooth { prior: similarity, t_d: cfg.t_d };
    let out = train_online(&mut state, stream, experts, matching, cfg, rng)?;
    Ok((state, out))
}

/// Context-free multiplicative weights over the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MwuOutput {
    /// Normalized weights before each step, plus the final weights.
    pub weights: Vec<Vec<f64>>,
    pub decisions: Vec<Decision>,
}

/// Weighted-majority decisions with multiplicative penalties. Each step's
/// reference label is the weighted-majority decision itself (or the truth in
/// oracle mode).
pub fn mwu_baseline(
    stream: &[Observation],
    experts: &mut dyn Annotator,
    eta: f64,
    label_mode: LabelMode,
) -> Result<MwuOutput> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::config(format!("MWU rate {eta} outside [0, 0.5]")));
    }
    let n = experts.num_experts();
    if n == 0 {
        return Err(Error::config("MWU needs at least one expert"));
    }
    let mut w = vec![1.0 / n as f64; n];
    let mut trace = Vec::with_capacity(stream.len() + 1);
    let mut decisions = Vec::with_capacity(stream.len());
    for (t, obs) in stream.iter().enumerate() {
        trace.push(w.clone());
        let votes = experts.votes(obs)?;
        let score: f64 = w.iter().zip(&votes).map(|(a, &v)| a * f64::from(v)).sum();
        let decided = Label::from(score > 0.5);
        let reference = match label_mode {
            LabelMode::Aggregated => decided,
            LabelMode::Oracle => experts.reveal(obs)?,
        };
        let costs = experts.costs(obs);
        let cost: f64 = w.iter().zip(costs.as_slice()).map(|(a, c)| a * c).sum();
        decisions.push(Decision { id: obs.id, group: obs.group, label: decided, cost, iter: t, classifier_weight: 0.0 });
        for (wi, &v) in w.iter_mut().zip(&votes) {
            if v != reference {
                *wi *= 1.0 - eta;
            }
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights("MWU weights vanished".into()));
        }
        w.iter_mut().for_each(|v| *v /= total);
    }
    trace.push(w);
    Ok(MwuOutput { weights: trace, decisions })
}

/// Weighted vote over the experts with fixed weights, as used to evaluate a
/// trained MWU policy.
pub fn weighted_vote(weights: &[f64], votes: &[Label]) -> Result<Label> {
    let mut padded = weights.to_vec();
    padded.push(0.0);
    let d = SimplexVector::new(padded)?;
    aggregate_full(&d, &PredictionVector::new(votes, 0.0)?)
}

/// Majority of `k` experts drawn uniformly with replacement; no learning.
pub fn random_committee_baseline<R: Rng + ?Sized>(
    stream: &[Observation],
    experts: &mut dyn Annotator,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Decision>> {
    if k == 0 {
        return Err(Error::config("committee size must be at least 1"));
    }
    let n = experts.num_experts();
    if n == 0 {
        return Err(Error::config("random committee needs at least one expert"));
    }
    let mut out = Vec::with_capacity(stream.len());
    for (t, obs) in stream.iter().enumerate() {
        let votes = experts.votes(obs)?;
        let costs = experts.costs(obs);
        let mut ones = 0;
        let mut cost = 0.0;
        for _ in 0..k {
            let j = rng.random_range(0..n);
            ones += usize::from(votes[j]);
            cost += costs.as_slice()[j];
        }
        let label = match (2 * ones).cmp(&k) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => Label::from(rng.random_bool(0.5)),
        };
        out.push(Decision { id: obs.id, group: obs.group, label, cost, iter: t, classifier_weight: 0.0 });
    }
    Ok(out)
}
