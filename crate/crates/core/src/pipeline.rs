//! Prediction vectors, aggregation, and the combined classifier/deferrer state.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::Annotator;
use crate::model::{Label, Observation, PredictionVector, SimplexVector};
use crate::nn::Network;
use crate::tree::DecisionTree;

/// `exp(x) / (exp(x) + exp(1 - x))`, a logistic curve centred at 0.5.
pub fn sigma(x: f64) -> f64 {
    crate::nn::sigmoid(2.0 * x - 1.0)
}

fn check_len(d: &SimplexVector, y_e: &PredictionVector) -> Result<()> {
    if d.len() != y_e.len() {
        return Err(Error::Shape { expected: y_e.len(), got: d.len() });
    }
    Ok(())
}

/// Soft pipeline prediction `sigma(D . y_e)`.
pub fn soft_prediction(d: &SimplexVector, y_e: &PredictionVector) -> Result<f64> {
    check_len(d, y_e)?;
    Ok(sigma(d.dot(y_e.as_slice())))
}

/// Weighted vote over every slot: 1 iff `D . y_e > 0.5`.
pub fn aggregate_full(d: &SimplexVector, y_e: &PredictionVector) -> Result<Label> {
    check_len(d, y_e)?;
    Ok(Label::from(d.dot(y_e.as_slice()) > 0.5))
}

/// Outcome of a sampled committee.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Committee {
    pub label: Label,
    /// Drawn slots in draw order (repeats possible).
    pub members: Vec<usize>,
}

impl Committee {
    /// Total cost of the drawn slots.
    pub fn cost(&self, costs: &[f64]) -> f64 {
        self.members.iter().map(|&i| costs[i]).sum()
    }
}

/// Majority of `k` slots drawn i.i.d. from `d`; the classifier votes its
/// thresholded prediction and ties go to a fair coin.
pub fn aggregate_committee<R: Rng + ?Sized>(
    d: &SimplexVector,
    y_e: &PredictionVector,
    k: usize,
    rng: &mut R,
) -> Result<Committee> {
    check_len(d, y_e)?;
    if k == 0 {
        return Err(Error::config("committee size must be at least 1"));
    }
    let dist = WeightedIndex::new(d.as_slice())
        .map_err(|e| Error::DegenerateWeights(format!("cannot sample committee: {e}")))?;
    let members: Vec<usize> = (0..k).map(|_| dist.sample(rng)).collect();
    let ones = members.iter().filter(|&&i| y_e.vote(i) == 1).count();
    let label = match (2 * ones).cmp(&k) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => Label::from(rng.random_bool(0.5)),
    };
    Ok(Committee { label, members })
}

/// How the pipeline turns deferrer weights and votes into one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Full,
    Committee { k: usize },
}

/// Either classifier family used by the tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Net(Network),
    Tree(DecisionTree),
}

impl Classifier {
    pub fn predict_prob(&self, x: &[f64]) -> Result<f64> {
        match self {
            Classifier::Net(net) => net.predict_prob(x),
            Classifier::Tree(tree) => Ok(tree.predict_prob(x)),
        }
    }
}

/// Classifier, deferrer and committee size. Experts are reached through an
/// [`Annotator`], so the state itself never holds ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub classifier: Classifier,
    pub deferrer: Network,
    pub k: usize,
}

impl PipelineState {
    pub fn new(classifier: Classifier, deferrer: Network, num_experts: usize, k: usize) -> Result<Self> {
        if deferrer.output_dim() != num_experts + 1 {
            return Err(Error::Shape { expected: num_experts + 1, got: deferrer.output_dim() });
        }
        if k == 0 || k > num_experts + 1 {
            return Err(Error::config(format!("committee size {k} outside [1, {}]", num_experts + 1)));
        }
        Ok(PipelineState { classifier, deferrer, k })
    }

    pub fn num_slots(&self) -> usize {
        self.deferrer.output_dim()
    }

    pub fn deferral(&self, obs: &Observation) -> Result<SimplexVector> {
        self.deferrer.predict_simplex(&obs.features)
    }

    /// Queries every expert once and appends the classifier probability.
    pub fn prediction_vector(&self, obs: &Observation, experts: &mut dyn Annotator) -> Result<PredictionVector> {
        let votes = experts.votes(obs)?;
        if votes.len() + 1 != self.num_slots() {
            return Err(Error::Shape { expected: self.num_slots() - 1, got: votes.len() });
        }
        PredictionVector::new(&votes, self.classifier.predict_prob(&obs.features)?)
    }

    /// One pipeline decision with the given weights, returning the label and
    /// the cost actually incurred (sampled slots for committees, expected cost
    /// under `d` for the full vote).
    pub fn decide<R: Rng + ?Sized>(
        &self,
        d: &SimplexVector,
        y_e: &PredictionVector,
        costs: &[f64],
        mode: Aggregation,
        rng: &mut R,
    ) -> Result<(Label, f64, Vec<usize>)> {
        match mode {
            Aggregation::Full => Ok((aggregate_full(d, y_e)?, d.dot(costs), Vec::new())),
            Aggregation::Committee { k } => {
                let c = aggregate_committee(d, y_e, k, rng)?;
                let cost = c.cost(costs);
                Ok((c.label, cost, c.members))
            }
        }
    }
}
