//! Expert/input similarity priors.
//!
//! A similarity scores how well each slot (experts first, classifier last)
//! fits an input. Per-category similarities are stored as a [`DSimTable`];
//! per-sample similarities built from labelled anchors use
//! [`AnchorSimilarity`]. Both implement [`Similarity`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::groups;
use crate::model::{normalize, Observation, SimplexVector};

/// Classifier entry used by the built-in tables so the classifier starts with
/// a small positive weight.
pub const CLASSIFIER_PRIOR: f64 = 0.1;

pub trait Similarity: Send + Sync {
    /// Number of slots, including the classifier.
    fn num_slots(&self) -> usize;

    /// Raw scores in `[0,1]` for every slot.
    fn scores(&self, obs: &Observation) -> Result<Vec<f64>>;

    /// Deferrer distribution proportional to the scores. If every expert
    /// score is zero the experts fall back to equal weight.
    fn prior(&self, obs: &Observation) -> Result<SimplexVector> {
        let mut s = self.scores(obs)?;
        fallback_uniform(&mut s);
        normalize(&s)
    }

    /// Like [`Similarity::prior`] but with the classifier slot forced to zero,
    /// as used when mixing the prior into a learned deferrer.
    fn expert_prior(&self, obs: &Observation) -> Result<SimplexVector> {
        let mut s = self.scores(obs)?;
        let last = s.len() - 1;
        s[last] = 0.0;
        fallback_uniform(&mut s);
        normalize(&s)
    }
}

fn fallback_uniform(scores: &mut [f64]) {
    let experts = scores.len() - 1;
    if scores[..experts].iter().all(|v| *v == 0.0) {
        scores[..experts].iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Per-category table indexed by `(slot, category)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DSimTable {
    rows: Vec<Vec<f64>>,
}

impl DSimTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::config("similarity table needs at least one expert row and the classifier row"));
        }
        let cats = rows[0].len();
        if cats == 0 {
            return Err(Error::config("similarity table has no categories"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cats {
                return Err(Error::Shape { expected: cats, got: row.len() });
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::config(format!("similarity {v} in row {i} outside [0,1]")));
            }
        }
        for c in 0..cats {
            if rows.iter().all(|r| r[c] == 0.0) {
                return Err(Error::config(format!("category {c} has no positive similarity")));
            }
        }
        Ok(DSimTable { rows })
    }

    /// Every slot gets the same score in every category.
    pub fn uniform(num_slots: usize, num_categories: usize) -> Self {
        DSimTable { rows: vec![vec![1.0; num_categories]; num_slots] }
    }

    pub fn num_categories(&self) -> usize {
        self.rows[0].len()
    }

    pub fn get(&self, slot: usize, category: usize) -> f64 {
        self.rows[slot][category]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Column of raw scores for one category.
    pub fn column(&self, category: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[category]).collect()
    }

    /// Comma-separated text: one line per slot (classifier last), one column
    /// per category. Lines starting with `#` are comments.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i as u64 + 1, message: e.to_string() })?;
            rows.push(row);
        }
        DSimTable::new(rows)
    }

    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

impl Similarity for DSimTable {
    fn num_slots(&self) -> usize {
        self.rows.len()
    }

    fn scores(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.group >= self.num_categories() {
            return Err(Error::config(format!("no similarity column for category {}", obs.group)));
        }
        Ok(self.column(obs.group))
    }
}

/// Cluster-task prior: `e1` scores `1 - s` on orange and `s` on blue, `e2`
/// the reverse, the classifier 0.1 everywhere.
pub fn make_cluster_dsim(s: f64) -> Result<DSimTable> {
    if !(0.0..=0.5).contains(&s) {
        return Err(Error::config(format!("cluster similarity strength s={s} outside [0, 0.5]")));
    }
    let mut rows = vec![vec![0.0; 2]; 3];
    rows[0][groups::ORANGE] = 1.0 - s;
    rows[0][groups::BLUE] = s;
    rows[1][groups::ORANGE] = s;
    rows[1][groups::BLUE] = 1.0 - s;
    rows[2] = vec![CLASSIFIER_PRIOR; 2];
    DSimTable::new(rows)
}

/// Content-moderation prior over the forty-expert panel: `n_s` randomly chosen
/// AAE experts score 1 on AAE posts, `n_s` randomly chosen non-AAE experts
/// score 1 on non-AAE posts, everything else 0.
pub fn make_cm_dsim<R: Rng + ?Sized>(n_s: usize, classifier_entry: f64, rng: &mut R) -> Result<DSimTable> {
    if n_s > 10 {
        return Err(Error::config(format!("n_s={n_s} outside [0, 10]")));
    }
    let mut rows = vec![vec![0.0; 2]; 41];
    for i in rand::seq::index::sample(rng, 30, n_s) {
        rows[i][groups::NON_AAE] = 1.0;
    }
    for i in rand::seq::index::sample(rng, 10, n_s) {
        rows[30 + i][groups::AAE] = 1.0;
    }
    rows[40] = vec![classifier_entry; 2];
    DSimTable::new(rows)
}

/// Squared-exponential kernel `exp(-|a-b|^2 / h^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub bandwidth: f64,
}

impl GaussianKernel {
    /// Bandwidth set to the median pairwise distance among `points`.
    pub fn median_heuristic(points: &[&[f64]]) -> Self {
        let mut dists = Vec::new();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                dists.push(euclidean(points[i], points[j]));
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = dists.get(dists.len() / 2).copied().unwrap_or(1.0);
        GaussianKernel { bandwidth: if median > 0.0 { median } else { 1.0 } }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = euclidean(a, b);
        (-(d * d) / (self.bandwidth * self.bandwidth)).exp()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One hand-labelled reference input and which experts got it right.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub features: Vec<f64>,
    pub expert_correct: Vec<bool>,
}

/// Per-sample similarity: an expert's score for `x` is the mean kernel value
/// between `x` and the anchors that expert labelled correctly (0 if none).
pub struct AnchorSimilarity<K> {
    anchors: Vec<Anchor>,
    kernel: K,
    classifier_entry: f64,
}

impl<K> AnchorSimilarity<K>
where
    K: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    pub fn new(anchors: Vec<Anchor>, kernel: K, classifier_entry: f64) -> Result<Self> {
        let Some(first) = anchors.first() else {
            return Err(Error::config("anchor set is empty"));
        };
        let m = first.expert_correct.len();
        if anchors.iter().any(|a| a.expert_correct.len() != m) {
            return Err(Error::config("anchors disagree on the number of experts"));
        }
        Ok(AnchorSimilarity { anchors, kernel, classifier_entry })
    }

    pub fn num_experts(&self) -> usize {
        self.anchors[0].expert_correct.len()
    }

    pub fn score(&self, expert: usize, x: &[f64]) -> f64 {
        let (sum, n) = self
            .anchors
            .iter()
            .filter(|a| a.expert_correct[expert])
            .fold((0.0, 0usize), |(s, n), a| (s + (self.kernel)(x, &a.features), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl AnchorSimilarity<Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>> {
    /// Anchor similarity with the default squared-exponential kernel.
    pub fn with_default_kernel(anchors: Vec<Anchor>, classifier_entry: f64) -> Result<Self> {
        let points: Vec<&[f64]> = anchors.iter().map(|a| a.features.as_slice()).collect();
        let kernel = GaussianKernel::median_heuristic(&points);
        AnchorSimilarity::new(anchors, Box::new(move |a: &[f64], b: &[f64]| kernel.eval(a, b)), classifier_entry)
    }
}

impl<K> Similarity for AnchorSimilarity<K>
where
    K: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn num_slots(&self) -> usize {
        self.num_experts() + 1
    }

    fn scores(&self, obs: &Observation) -> Result<Vec<f64>> {
        let mut s: Vec<f64> = (0..self.num_experts()).map(|e| self.score(e, &obs.features)).collect();
        s.push(self.classifier_entry);
        Ok(s)
    }
}
