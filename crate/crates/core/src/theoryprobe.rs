//! Monte-Carlo witnesses for the analytical statements about closed training.
//!
//! The deferrer here is a bare weight vector per group, updated by a fixed
//! reward for agreeing experts and a fixed penalty for everyone else. Every
//! probe returns a [`ProbeResult`] holding the measured quantity, the claimed
//! bound and the Monte-Carlo standard error.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::biased_count;
use crate::model::{project_simplex, SimplexVector};

/// Default per-step penalty.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Trials handled by one random stream.
const BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: String,
    pub params: serde_json::Value,
    pub measured: f64,
    pub bound: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Rewards the experts in `correct` and penalizes the rest by `delta_p`.
/// The reward `(m / |correct| - 1) * delta_p` keeps the total weight fixed;
/// weights are then clipped at zero and projected back onto the simplex.
pub fn abstract_update(w: &SimplexVector, correct: &[usize], delta_p: f64) -> SimplexVector {
    let m = w.len();
    let mut is_correct = vec![false; m];
    for &i in correct {
        is_correct[i] = true;
    }
    let k = is_correct.iter().filter(|c| **c).count();
    let reward = if k == 0 { 0.0 } else { (m as f64 / k as f64 - 1.0) * delta_p };
    let next: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(&is_correct)
        .map(|(v, &c)| (if c { v + reward } else { v - delta_p }).max(0.0))
        .collect();
    project_simplex(&next)
}

/// Per-group weights over experts, as used in the probes.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractDeferrer {
    pub weights: Vec<SimplexVector>,
    pub delta_p: f64,
}

impl AbstractDeferrer {
    pub fn uniform(num_groups: usize, m: usize, delta_p: f64) -> Self {
        AbstractDeferrer { weights: vec![SimplexVector::uniform(m); num_groups], delta_p }
    }

    pub fn update(&mut self, group: usize, correct: &[usize]) {
        self.weights[group] = abstract_update(&self.weights[group], correct, self.delta_p);
    }
}

fn mean_stderr(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Runs `trials` independent draws of `f` in parallel blocks and returns
/// `(mean, stderr)`. The result does not depend on the thread count.
fn monte_carlo<F>(seed: u64, trials: usize, f: F) -> (f64, f64)
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let blocks = trials.div_ceil(BLOCK);
    let (sum, sum_sq) = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let n = BLOCK.min(trials - b * BLOCK);
            (0..n).fold((0.0, 0.0), |(s, q), _| {
                let x = f(&mut rng);
                (s + x, q + x * x)
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |(s, q), (a, b)| (s + a, q + b));
    mean_stderr(sum, sum_sq, trials)
}

/// Accuracy on group 0 and group 1 of each expert in a biased panel: the
/// first `biased_count(m, alpha)` are coin flips on group 0, the rest on
/// group 1.
fn biased_accuracies(m: usize, alpha: f64) -> Vec<[f64; 2]> {
    let against_zero = biased_count(m, alpha);
    (0..m).map(|i| if i < against_zero { [0.5, 1.0] } else { [1.0, 0.5] }).collect()
}

fn policy_accuracy(w: &SimplexVector, acc: &[[f64; 2]], group: usize) -> f64 {
    w.as_slice().iter().zip(acc).map(|(wi, a)| wi * a[group]).sum()
}

/// Mean signed disparity `acc(z=1) - acc(z=0)` per step, with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim1Trajectory {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Claim1Trajectory {
    /// Least-squares slope of the mean disparity against the step index.
    pub fn slope(&self) -> f64 {
        let n = self.mean.len() as f64;
        let xbar = (n - 1.0) / 2.0;
        let ybar = self.mean.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in self.mean.iter().enumerate() {
            let dx = i as f64 - xbar;
            sxy += dx * (y - ybar);
            sxx += dx * dx;
        }
        if sxx == 0.0 {
            0.0
        } else {
            sxy / sxx
        }
    }
}

/// Single-expert deferral on a biased panel, trained on the chosen expert's
/// own answer. Each step draws a group uniformly, samples one expert from
/// that group's weights and rewards it. Returns the mean disparity of the
/// induced policy at steps `0..=steps`.
pub fn simulate_claim1(alpha: f64, m: usize, steps: usize, trials: usize, delta_p: f64, seed: u64) -> Result<Claim1Trajectory> {
    if !(0.0..=1.0).contains(&alpha) || m < 2 || trials < 2 {
        return Err(Error::config("claim1 needs alpha in [0,1], m >= 2 and at least two trials"));
    }
    let acc = biased_accuracies(m, alpha);
    let blocks = trials.div_ceil(BLOCK);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let mut sum = vec![0.0; steps + 1];
            let mut sum_sq = vec![0.0; steps + 1];
            for _ in 0..BLOCK.min(trials - b * BLOCK) {
                let mut def = AbstractDeferrer::uniform(2, m, delta_p);
                let mut acc_g = [policy_accuracy(&def.weights[0], &acc, 0), policy_accuracy(&def.weights[1], &acc, 1)];
                for t in 0..=steps {
                    let disp = acc_g[1] - acc_g[0];
                    sum[t] += disp;
                    sum_sq[t] += disp * disp;
                    if t == steps {
                        break;
                    }
                    let z = usize::from(rng.random_bool(0.5));
                    let chosen = sample_index(def.weights[z].as_slice(), &mut rng);
                    def.update(z, &[chosen]);
                    acc_g[z] = policy_accuracy(&def.weights[z], &acc, z);
                }
            }
            (sum, sum_sq)
        })
        .collect();
    let mut mean = vec![0.0; steps + 1];
    let mut stderr = vec![0.0; steps + 1];
    for t in 0..=steps {
        let s: f64 = partial.iter().map(|p| p.0[t]).sum();
        let q: f64 = partial.iter().map(|p| p.1[t]).sum();
        (mean[t], stderr[t]) = mean_stderr(s, q, trials);
    }
    Ok(Claim1Trajectory { mean, stderr })
}

fn sample_index<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in w.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|v| *v > 0.0).unwrap_or(w.len() - 1)
}

/// Claim 1 probe: step-0 disparity equals `alpha - 0.5` and the mean
/// trajectory is flat.
pub fn claim1_probe(alpha: f64, m: usize, steps: usize, trials: usize, seed: u64) -> Result<(ProbeResult, Claim1Trajectory)> {
    let traj = simulate_claim1(alpha, m, steps, trials, DEFAULT_DELTA, seed)?;
    let slope = traj.slope();
    let start_ok = (traj.mean[0] - (alpha - 0.5)).abs() <= 0.01;
    let result = ProbeResult {
        probe: "claim1".into(),
        params: serde_json::json!({ "alpha": alpha, "m": m, "steps": steps, "trials": trials, "delta": DEFAULT_DELTA }),
        measured: slope,
        bound: 1e-4,
        stderr: traj.stderr[steps],
        pass: start_ok && slope.abs() < 1e-4,
    };
    Ok((result, traj))
}

/// Claimed range for the starting disparity under a dSim prior that scores
/// unbiased experts 1 and biased experts `gamma`.
pub fn disparity_bounds(gamma: f64, alpha: f64) -> (f64, f64) {
    (gamma / 2.0, alpha / (1.0 - alpha) * gamma / 2.0)
}

/// Exact starting disparity `acc(z=1) - acc(z=0)` of that prior.
pub fn exact_prior_disparity(gamma: f64, alpha: f64) -> f64 {
    let miss0 = 0.5 * alpha * gamma / ((1.0 - alpha) + alpha * gamma);
    let miss1 = 0.5 * (1.0 - alpha) * gamma / ((1.0 - alpha) * gamma + alpha);
    miss0 - miss1
}

fn prior_weights(m: usize, alpha: f64, gamma: f64, group: usize) -> Vec<f64> {
    biased_accuracies(m, alpha)
        .iter()
        .map(|a| if a[group] == 1.0 { 1.0 } else { gamma })
        .collect()
}

/// Monte-Carlo starting disparity of the prior-induced single-expert policy
/// on `biased_panel(m, alpha)`, checked against [`disparity_bounds`].
pub fn remark2_probe(gamma: f64, alpha: f64, m: usize, trials: usize, seed: u64) -> Result<ProbeResult> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..1.0).contains(&alpha) {
        return Err(Error::config("remark2 needs gamma in [0,1] and alpha in [0,1)"));
    }
    let acc = biased_accuracies(m, alpha);
    let dists = [0, 1].map(|g| {
        WeightedIndex::new(prior_weights(m, alpha, gamma, g))
            .map_err(|e| Error::DegenerateWeights(e.to_string()))
    });
    let [d0, d1] = dists;
    let (d0, d1) = (d0?, d1?);
    let (mean, se) = monte_carlo(seed, trials, |rng| {
        let hit = |d: &WeightedIndex<f64>, g: usize, rng: &mut ChaCha8Rng| {
            let e = d.sample(rng);
            f64::from(u8::from(rng.random_bool(acc[e][g])))
        };
        hit(&d1, 1, rng) - hit(&d0, 0, rng)
    });
    let (lo, hi) = disparity_bounds(gamma, alpha);
    Ok(ProbeResult {
        probe: "remark2".into(),
        params: serde_json::json!({
            "gamma": gamma, "alpha": alpha, "m": m, "trials": trials,
            "exact": exact_prior_disparity(gamma, alpha), "upper": hi,
        }),
        measured: mean,
        bound: lo,
        stderr: se,
        pass: mean >= lo - 3.0 * se && mean <= hi + 3.0 * se,
    })
}

/// Prior weights where the best expert leads every other expert by exactly
/// `beta`: `d_j = (1 + (m-1) beta) / m`, the rest `d_j - beta`.
pub fn theorem1_weights(beta: f64, m: usize) -> Result<SimplexVector> {
    let top = (1.0 + (m as f64 - 1.0) * beta) / m as f64;
    let mut w = vec![top - beta; m];
    w[0] = top;
    SimplexVector::new(w)
}

/// Exact expected one-step change of expert 0's weight under single-expert
/// deferral with reward `delta` and penalty `delta / (m-1)`.
pub fn theorem1_exact(w: &SimplexVector, delta: f64) -> f64 {
    let m = w.len() as f64;
    delta * (m * w[0] - 1.0) / (m - 1.0)
}

/// Measures the expected gain of the top expert after one single-expert
/// step and compares it with the claimed `2 * beta * delta`.
pub fn theorem1_probe(beta: f64, delta: f64, m: usize, trials: usize, seed: u64) -> Result<ProbeResult> {
    if m < 2 || !(0.0..=1.0).contains(&beta) || !(delta > 0.0) {
        return Err(Error::config("theorem1 needs m >= 2, beta in [0,1] and delta > 0"));
    }
    let w = theorem1_weights(beta, m)?;
    let delta_p = delta / (m as f64 - 1.0);
    let (mean, se) = monte_carlo(seed, trials, |rng| {
        let chosen = sample_index(w.as_slice(), rng);
        abstract_update(&w, &[chosen], delta_p)[0] - w[0]
    });
    let bound = 2.0 * beta * delta;
    Ok(ProbeResult {
        probe: "theorem1".into(),
        params: serde_json::json!({
            "beta": beta, "delta": delta, "m": m, "trials": trials, "exact": theorem1_exact(&w, delta),
        }),
        measured: mean,
        bound,
        stderr: se,
        pass: mean >= bound - 3.0 * se,
    })
}

/// Claimed exploration threshold `1 - (1 - k/(2m))^(1/k)`.
pub fn theorem2_threshold(k: usize, m: usize) -> f64 {
    let (k, m) = (k as f64, m as f64);
    // ln_1p/exp_m1 keep precision when k/(2m) is tiny.
    -((-k / (2.0 * m)).ln_1p() / k).exp_m1()
}

/// Expected change predicted by substituting `k' = k/2` correct members.
pub fn theorem2_expression(epsilon: f64, k: usize, m: usize, delta_p: f64) -> f64 {
    let miss = (1.0 - epsilon).powi(k as i32);
    (1.0 - miss) * (2.0 * m as f64 / k as f64 - 1.0) * delta_p - miss * delta_p
}

/// Weights for the exploration probe: expert 0 is a perfect expert with
/// weight `epsilon`; the other experts are split into perfect ones sharing
/// `0.7 (1 - epsilon)` and always-wrong ones sharing `0.3 (1 - epsilon)`.
/// Returns the weights and whether each expert votes correctly.
pub fn theorem2_panel(epsilon: f64, m: usize) -> Result<(SimplexVector, Vec<bool>)> {
    if m < 2 || !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config("theorem2 needs m >= 2 and epsilon in [0,1]"));
    }
    let others = m - 1;
    let good = if others == 1 { 1 } else { others.div_ceil(2) };
    let bad = others - good;
    let mut w = vec![epsilon];
    let mut correct = vec![true];
    let good_share = if bad == 0 { 1.0 } else { 0.7 };
    for _ in 0..good {
        w.push(good_share * (1.0 - epsilon) / good as f64);
        correct.push(true);
    }
    for _ in 0..bad {
        w.push(0.3 * (1.0 - epsilon) / bad as f64);
        correct.push(false);
    }
    Ok((SimplexVector::new(w)?, correct))
}

/// One committee step: draw `k` experts from `w`, take the majority (fair
/// coin on ties), reward distinct members agreeing with it, penalize the
/// rest. Returns the change in expert 0's weight.
pub fn theorem2_step<R: Rng + ?Sized>(w: &SimplexVector, votes_correct: &[bool], k: usize, delta_p: f64, rng: &mut R) -> f64 {
    let members: Vec<usize> = (0..k).map(|_| sample_index(w.as_slice(), rng)).collect();
    let yes = members.iter().filter(|&&i| votes_correct[i]).count();
    let majority_correct = match (2 * yes).cmp(&k) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => rng.random_bool(0.5),
    };
    let mut agree: Vec<usize> = members.into_iter().filter(|&i| votes_correct[i] == majority_correct).collect();
    agree.sort_unstable();
    agree.dedup();
    abstract_update(w, &agree, delta_p)[0] - w[0]
}

/// Expected change of the hidden expert's weight at `epsilon`. `bound` holds
/// the value predicted by [`theorem2_expression`].
pub fn theorem2_probe(epsilon: f64, k: usize, m: usize, trials: usize, seed: u64) -> Result<ProbeResult> {
    if k == 0 || k > m {
        return Err(Error::config(format!("theorem2 needs 1 <= k <= m, got k={k} m={m}")));
    }
    let (w, correct) = theorem2_panel(epsilon, m)?;
    let (mean, se) = monte_carlo(seed, trials, |rng| theorem2_step(&w, &correct, k, DEFAULT_DELTA, rng));
    let predicted = theorem2_expression(epsilon, k, m, DEFAULT_DELTA);
    let threshold = theorem2_threshold(k, m);
    let agrees = if mean.abs() < 3.0 * se { true } else { (mean > 0.0) == (epsilon > threshold) };
    Ok(ProbeResult {
        probe: "theorem2".into(),
        params: serde_json::json!({
            "epsilon": epsilon, "k": k, "m": m, "trials": trials, "threshold": threshold,
        }),
        measured: mean,
        bound: predicted,
        stderr: se,
        pass: agrees,
    })
}

/// Sign-flip check around the claimed threshold: negative well below it,
/// positive well above it, and indistinguishable from zero within 20% of it.
pub fn theorem2_flip_probe(k: usize, m: usize, trials: usize, seed: u64) -> Result<ProbeResult> {
    let thr = theorem2_threshold(k, m);
    let points = [0.5, 0.8, 1.0, 1.2, 2.0];
    let mut measured = Vec::new();
    for (i, f) in points.iter().enumerate() {
        let r = theorem2_probe(thr * f, k, m, trials, seed.wrapping_add(i as u64))?;
        measured.push((r.measured, r.stderr));
    }
    let below = measured[0].0 < 0.0;
    let above = measured[4].0 > 0.0;
    let band = measured[1..4].iter().all(|(v, s)| v.abs() < 3.0 * s);
    let at = measured[2];
    Ok(ProbeResult {
        probe: "theorem2".into(),
        params: serde_json::json!({
            "k": k, "m": m, "trials": trials, "threshold": thr,
            "factors": points, "changes": measured.iter().map(|p| p.0).collect::<Vec<_>>(),
        }),
        measured: at.0,
        bound: 0.0,
        stderr: at.1,
        pass: below && above && band,
    })
}
