//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use closed_defer::config::{SeedStreams, Stream};
use closed_defer::dsim::make_cluster_dsim;
use closed_defer::experiments::{
    gen_cluster_data, run_repetitions, run_sweep, split_dataset, summarize, Algorithm, ClusterSpec, DSimSpec,
    Settings, Summary, SweepSpec, Task,
};
use closed_defer::experts::{make_cluster_experts, Annotator, PanelAnnotator};
use closed_defer::model::{project_simplex, CostVector, Label, Observation, PredictionVector, Sample, SimplexVector};
use closed_defer::nn::{Head, Network};
use closed_defer::pipeline::{aggregate_committee, Aggregation, Classifier, PipelineState};
use closed_defer::theoryprobe::{claim1_probe, remark2_probe, theorem1_probe, theorem2_flip_probe};
use closed_defer::training::{
    combined_loss, loss_gradients, smooth_matching, strict_matching, BatchItem, TrainOutput,
};
use closed_defer::tree::DecisionTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn run_summary(mut s: Settings, algorithm: Algorithm) -> (Summary, f64) {
    s.algorithm = algorithm;
    let start = Instant::now();
    let runs = run_repetitions(&s).expect("run failed");
    let per_run = start.elapsed().as_secs_f64() / runs.len() as f64;
    (summarize(&runs, None, None), per_run)
}

fn ac1() -> Outcome {
    let (s, secs) = run_summary(Settings::defaults(Task::Cluster), Algorithm::Strict);
    let (o, orange, blue) = (s.overall.mean, s.acc_group_0.mean, s.acc_group_1.mean);
    Outcome {
        pass: within(o, 0.92, 0.05) && within(orange, 0.85, 0.06) && blue >= 0.95 && secs < 60.0,
        detail: format!(
            "strict cluster over {} seeds: overall {o:.4} (0.92 ± 0.05), orange {orange:.4} (0.85 ± 0.06), blue {blue:.4} (>= 0.95), {secs:.2} s per seed",
            s.repetitions
        ),
    }
}

fn ac2() -> Outcome {
    let (s, _) = run_summary(Settings::defaults(Task::Cluster), Algorithm::Smooth);
    let o = s.overall.mean;
    Outcome {
        pass: (0.68..=0.80).contains(&o),
        detail: format!("smooth cluster, T_d=500: overall {o:.4} ± {:.4} (in [0.68, 0.80])", s.overall.std),
    }
}

fn ac3() -> Outcome {
    let mut settings = Settings::defaults(Task::Cluster);
    settings.dsim = DSimSpec::Uniform;
    let (s, _) = run_summary(settings, Algorithm::Strict);
    let o = s.overall.mean;
    Outcome {
        pass: (0.53..=0.68).contains(&o),
        detail: format!("uniform dSim cluster: overall {o:.4} (in [0.53, 0.68])"),
    }
}

fn ac4() -> Outcome {
    let settings = Settings::defaults(Task::CmSurrogate);
    let (strict, _) = run_summary(settings.clone(), Algorithm::Strict);
    let (smooth, _) = run_summary(settings.clone(), Algorithm::Smooth);
    let (base, _) = run_summary(settings, Algorithm::RandomCommittee);
    let b = base.overall.mean;
    let calibrated = within(b, 0.79, 0.04);
    let strict_ok = strict.overall.mean >= b + 0.02;
    let smooth_ok = smooth.overall.mean > b;
    Outcome {
        pass: calibrated && strict_ok && smooth_ok,
        detail: format!(
            "surrogate, n_s=2, k=5, {} reps: strict {:.4}, smooth {:.4}, random committee {b:.4} (0.79 ± 0.04); strict - baseline = {:+.4} (>= 0.02)",
            strict.repetitions,
            strict.overall.mean,
            smooth.overall.mean,
            strict.overall.mean - b
        ),
    }
}

fn ac5() -> Outcome {
    let mut settings = Settings::defaults(Task::CmSurrogate);
    settings.algorithm = Algorithm::Strict;
    settings.sweep = Some(SweepSpec { parameter: "dsim.n_s".into(), values: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0] });
    let points = run_sweep(&settings).expect("sweep failed");
    let d: Vec<f64> = points.iter().map(|p| p.summary.disparity.mean).collect();
    let rises: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).filter(|r| *r > 0.0).collect();
    let pass = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.01);
    let shown: Vec<String> = d.iter().map(|v| format!("{v:.4}")).collect();
    Outcome {
        pass,
        detail: format!(
            "strict disparity over n_s = 0,2,4,6,8,10: [{}]; {} increase(s), largest {:.4}",
            shown.join(", "),
            rises.len(),
            rises.iter().copied().fold(0.0, f64::max)
        ),
    }
}

fn ac6() -> Outcome {
    let start = Instant::now();
    let (r, traj) = claim1_probe(0.75, 8, 500, 10_000, 6).expect("claim1 probe failed");
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: r.pass && secs < 30.0,
        detail: format!(
            "claim 1, alpha=0.75, m=8: step-0 disparity {:.4} (0.25 ± 0.01), slope {:.2e} (|.| < 1e-4), {secs:.1} s",
            traj.mean[0], r.measured
        ),
    }
}

fn ac7() -> Outcome {
    let mut failures = Vec::new();
    let mut points = 0;
    for gi in 1..=9 {
        let gamma = gi as f64 / 10.0;
        for ai in 0..8 {
            let alpha = 0.55 + 0.05 * ai as f64;
            let r = remark2_probe(gamma, alpha, 20, 100_000, (gi * 10 + ai) as u64).expect("remark2 probe failed");
            points += 1;
            if !r.pass {
                failures.push(format!("(γ={gamma:.1}, α={alpha:.2}: {:.4} < {:.4})", r.measured, r.bound));
            }
        }
    }
    let shown: Vec<&str> = failures.iter().take(3).map(String::as_str).collect();
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "starting disparity inside [γ/2, α/(1-α)·γ/2] ± 3σ on {}/{points} grid points{}",
            points - failures.len(),
            if shown.is_empty() { String::new() } else { format!("; e.g. {}", shown.join(" ")) }
        ),
    }
}

fn ac8() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut seed = 0;
    for beta in [0.05, 0.1, 0.2] {
        for delta in [0.01, 0.05] {
            for m in [3, 10] {
                seed += 1;
                let r = theorem1_probe(beta, delta, m, 200_000, seed).expect("theorem1 probe failed");
                pass &= r.pass;
                if !r.pass {
                    lines.push(format!("(β={beta}, δ={delta}, m={m}: {:.5} vs {:.5})", r.measured, r.bound));
                }
            }
        }
    }
    let n = lines.len();
    lines.truncate(3);
    Outcome {
        pass,
        detail: format!(
            "top-expert gain >= 2βδ - 3·se on {}/12 settings{}",
            12 - n,
            if lines.is_empty() { String::new() } else { format!("; e.g. {}", lines.join(" ")) }
        ),
    }
}

fn ac9() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, (k, m)) in [(1, 2), (5, 41), (3, 10)].into_iter().enumerate() {
        let r = theorem2_flip_probe(k, m, 200_000, 90 + i as u64).expect("theorem2 probe failed");
        pass &= r.pass;
        let changes: Vec<String> = r.params["changes"]
            .as_array()
            .map(|a| a.iter().map(|v| format!("{:+.1e}", v.as_f64().unwrap_or(f64::NAN))).collect())
            .unwrap_or_default();
        parts.push(format!(
            "(k={k}, m={m}, ε*={:.5}: change at ε*·[0.5, 0.8, 1, 1.2, 2] = [{}], se {:.1e})",
            r.params["threshold"].as_f64().unwrap_or(f64::NAN),
            changes.join(", "),
            r.stderr
        ));
    }
    Outcome { pass, detail: parts.join(" ") }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn worst_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let experts = rng.random_range(1..4);
        let clf = Network::new(&[3, 4, 1], Head::Sigmoid, &mut rng).unwrap();
        let def = Network::new(&[3, 6, experts + 1], Head::Softmax, &mut rng).unwrap();
        let state = PipelineState::new(Classifier::Net(clf), def, experts, 1).unwrap();
        let batch: Vec<BatchItem> = (0..3)
            .map(|i| {
                let votes: Vec<Label> = (0..experts).map(|_| u8::from(rng.random_bool(0.5))).collect();
                let costs: Vec<f64> = (0..experts).map(|_| rng.random_range(0.0..2.0)).collect();
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                BatchItem {
                    obs: Sample::new(i, x, 0, 0).unwrap().obs,
                    label: u8::from(rng.random_bool(0.5)),
                    y_e: PredictionVector::new(&votes, 0.5).unwrap(),
                    costs: CostVector::new(&costs).unwrap(),
                }
            })
            .collect();
        let (g, _) = loss_gradients(&batch, &state, 1.0, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..state.deferrer.num_params() {
            let mut s = state.clone();
            let v = s.deferrer.param(i);
            s.deferrer.set_param(i, v + h);
            let up = combined_loss(&batch, &s, 1.0, 0.3).unwrap();
            s.deferrer.set_param(i, v - h);
            let down = combined_loss(&batch, &s, 1.0, 0.3).unwrap();
            worst = worst.max(rel_err(g.get(i), (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn worst_projection_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let step = 1e-3;
    let n = (1.0 / step) as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..=n {
            for j in 0..=(n - i) {
                let w = [i as f64 * step, j as f64 * step, (n - i - j) as f64 * step];
                let d: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, w);
                }
            }
        }
        let p = project_simplex(&v);
        let linf = p.as_slice().iter().zip(&best.1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(linf);
    }
    worst
}

fn worst_committee_tv() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for m in 2..=6usize {
        for k in 1..=5usize {
            let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            let d = SimplexVector::new(raw.iter().map(|v| v / total).collect()).unwrap();
            let votes: Vec<Label> = (0..m - 1).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let f: f64 = rng.random();
            let y = PredictionVector::new(&votes, f).unwrap();
            let mut bin = votes.clone();
            bin.push(u8::from(f > 0.5));
            // Exact probability of a 1 by walking all m^k ordered draws.
            let mut exact = 0.0;
            for code in 0..m.pow(k as u32) {
                let (mut c, mut p, mut ones) = (code, 1.0, 0);
                for _ in 0..k {
                    p *= d[c % m];
                    ones += usize::from(bin[c % m] == 1);
                    c /= m;
                }
                exact += p * match (2 * ones).cmp(&k) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
            let draws = 60_000;
            let hits: usize = (0..draws)
                .map(|_| usize::from(aggregate_committee(&d, &y, k, &mut rng).unwrap().label))
                .sum();
            worst = worst.max((hits as f64 / draws as f64 - exact).abs());
        }
    }
    worst
}

fn ac10() -> Outcome {
    let g = worst_gradient_error();
    let p = worst_projection_error();
    let t = worst_committee_tv();
    Outcome {
        pass: g < 1e-3 && p < 2e-3 && t < 0.01,
        detail: format!("gradient rel. error {g:.1e} (< 1e-3), projection L∞ {p:.1e} (< 2e-3), committee TV {t:.4} (< 0.01)"),
    }
}

/// Rewrites the truth of each input as soon as its votes are out.
struct Corrupting {
    inner: PanelAnnotator,
    truth: HashMap<u64, Label>,
}

impl Annotator for Corrupting {
    fn num_experts(&self) -> usize {
        self.inner.num_experts()
    }
    fn votes(&mut self, obs: &Observation) -> closed_defer::Result<Vec<Label>> {
        let v = self.inner.votes(obs)?;
        let flipped = 1 - self.truth[&obs.id];
        self.truth.insert(obs.id, flipped);
        self.inner.set_truth(obs.id, flipped);
        Ok(v)
    }
    fn costs(&self, obs: &Observation) -> CostVector {
        self.inner.costs(obs)
    }
    fn reveal(&self, obs: &Observation) -> closed_defer::Result<Label> {
        self.inner.reveal(obs)
    }
}

fn ac11() -> Outcome {
    let seeds = SeedStreams::new(21);
    let data = gen_cluster_data(&ClusterSpec::default(), &mut seeds.rng(Stream::Data)).unwrap();
    let split = split_dataset(&data, 0.8, 500, &mut seeds.rng(Stream::Split)).unwrap();
    let prior: Vec<Observation> = split.prior.iter().map(|s| s.obs.clone()).collect();
    let stream: Vec<Observation> = split.stream.iter().map(|s| s.obs.clone()).collect();
    let table = make_cluster_dsim(0.4).unwrap();
    let mut checked = 0;
    let mut identical = 0;
    for smooth in [false, true] {
        for aggregation in [Aggregation::Full, Aggregation::Committee { k: 2 }] {
            let mut cfg = Settings::defaults(Task::Cluster).train;
            cfg.aggregation = aggregation;
            cfg.prior.epochs = 5;
            let train = |corrupt: bool| -> (PipelineState, TrainOutput) {
                let deferrer =
                    Network::new(&[2, 16, 8, 3], Head::Softmax, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                let state = PipelineState::new(Classifier::Tree(DecisionTree::unfitted(4)), deferrer, 2, 1).unwrap();
                let inner = PanelAnnotator::new(make_cluster_experts(), &split.stream, 7);
                let mut rng = ChaCha8Rng::seed_from_u64(8);
                let mut plain = inner.clone();
                let mut wrapped = Corrupting { inner, truth: split.stream.iter().map(|s| (s.id(), s.true_label)).collect() };
                let experts: &mut dyn Annotator = if corrupt { &mut wrapped } else { &mut plain };
                if smooth {
                    smooth_matching(state, &stream, experts, &table, &cfg, &mut rng).unwrap()
                } else {
                    strict_matching(state, &prior, &stream, experts, &table, &cfg, &mut rng).unwrap()
                }
            };
            let (a, b) = (train(false), train(true));
            let bits = |n: &Network| (0..n.num_params()).map(|i| n.param(i).to_bits()).collect::<Vec<_>>();
            checked += 1;
            if a.1 == b.1 && bits(&a.0.deferrer) == bits(&b.0.deferrer) && a.0.classifier == b.0.classifier {
                identical += 1;
            }
        }
    }
    Outcome {
        pass: identical == checked,
        detail: format!("{identical}/{checked} trajectories bitwise identical after rewriting every true label"),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("AC1", ac1),
        ("AC2", ac2),
        ("AC3", ac3),
        ("AC4", ac4),
        ("AC5", ac5),
        ("AC6", ac6),
        ("AC7", ac7),
        ("AC8", ac8),
        ("AC9", ac9),
        ("AC10", ac10),
        ("AC11", ac11),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        println!(
            "{name:<5} {}  {}  [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: {} of 11 criteria fail: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
