use closed_defer::config::{SeedStreams, Stream};
use closed_defer::dsim::make_cluster_dsim;
use closed_defer::experiments::{
    evaluate, gen_cluster_data, gen_cm_surrogate, run_once, run_sweep, split_dataset, ClusterSpec, CMSpec,
    EvalPolicy, Settings, Stat, SweepSpec, Task,
};
use closed_defer::experts::{biased_panel, groups, make_cluster_experts, Cost, ExpertModel, ExpertPanel, PanelAnnotator};
use closed_defer::model::{Label, Observation, Sample};
use closed_defer::nn::{Gradients, Head, Network, OptimizerState};
use closed_defer::pipeline::{Aggregation, Classifier, PipelineState};
use closed_defer::training::{
    prior_fit_error, random_committee_baseline, strict_matching, LambdaSchedule, TrainConfig,
};
use closed_defer::tree::DecisionTree;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn accuracy(pred: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for p in pred {
        hit += usize::from(p);
        n += 1;
    }
    hit as f64 / n as f64
}

fn fit_tree(train: &[Sample], depth: usize) -> DecisionTree {
    let xs: Vec<&[f64]> = train.iter().map(|s| s.features()).collect();
    let ys: Vec<Label> = train.iter().map(|s| s.true_label).collect();
    let mut t = DecisionTree::unfitted(depth);
    t.fit(&xs, &ys).unwrap();
    t
}

/// Oracle for orange: a Gaussian likelihood-ratio rule with per-class means
/// and diagonal variances estimated from the true labels.
fn orange_oracle(orange: &[Sample]) -> impl Fn(&[f64]) -> Label {
    let fit = |label: Label| {
        let pts: Vec<&[f64]> = orange.iter().filter(|s| s.true_label == label).map(|s| s.features()).collect();
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..2).map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / n).collect();
        let var: Vec<f64> = (0..2).map(|d| pts.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).collect();
        (mean, var)
    };
    let (c0, c1) = (fit(0), fit(1));
    move |x: &[f64]| {
        let ll = |(m, v): &(Vec<f64>, Vec<f64>)| -> f64 {
            (0..2).map(|d| -0.5 * (x[d] - m[d]).powi(2) / v[d] - 0.5 * v[d].ln()).sum()
        };
        Label::from(ll(&c1) > ll(&c0))
    }
}

#[test]
fn best_feature_only_accuracy_is_three_quarters() {
    for seed in 0..10 {
        let data = gen_cluster_data(&ClusterSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (orange, blue): (Vec<Sample>, Vec<Sample>) =
            data.samples.iter().cloned().partition(|s| s.group() == groups::ORANGE);
        let rule = orange_oracle(&orange);
        let orange_hits = orange.iter().filter(|s| rule(s.features()) == s.true_label).count();
        let blue_ones = blue.iter().filter(|s| s.true_label == 1).count();
        let blue_hits = blue_ones.max(blue.len() - blue_ones);
        let acc = (orange_hits + blue_hits) as f64 / data.len() as f64;
        assert!((acc - 0.75).abs() <= 0.02, "seed {seed}: {acc}");
    }
}

/// The tree matches the likelihood-ratio oracle on orange, and is at least
/// 0.99 accurate whenever the oracle itself is.
#[test]
fn depth_four_tree_separates_orange() {
    for seed in 0..10 {
        let data = gen_cluster_data(&ClusterSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let orange: Vec<Sample> = data.samples.iter().filter(|s| s.group() == groups::ORANGE).cloned().collect();
        let tree = fit_tree(&orange, 4);
        let acc = accuracy(orange.iter().map(|s| Label::from(tree.predict_prob(s.features()) > 0.5) == s.true_label));
        let rule = orange_oracle(&orange);
        let oracle = accuracy(orange.iter().map(|s| rule(s.features()) == s.true_label));
        assert!(acc >= oracle - 0.01, "seed {seed}: tree {acc}, oracle {oracle}");
        if oracle >= 0.995 {
            assert!(acc >= 0.99, "seed {seed}: tree {acc}, oracle {oracle}");
        }
    }
}

#[test]
fn surrogate_linear_probe_is_calibrated() {
    let data = gen_cm_surrogate(&CMSpec::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (train, test) = data.samples.split_at(20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::new(&[25, 1], Head::Sigmoid, &mut rng).unwrap();
    let mut opt = OptimizerState::adam(0.01).unwrap();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..5 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(100) {
            let mut g = Gradients::zeros_like(&net);
            for &i in chunk {
                let tr = net.forward_trace(train[i].features()).unwrap();
                let f = tr.output[0];
                let y = f64::from(train[i].true_label);
                net.accumulate_backward(&tr, &[(f - y) / (f * (1.0 - f))], 1.0 / chunk.len() as f64, &mut g)
                    .unwrap();
            }
            opt.step(&mut net, &g).unwrap();
        }
    }
    let acc = accuracy(test.iter().map(|s| Label::from(net.predict_prob(s.features()).unwrap() > 0.5) == s.true_label));
    assert!((acc - 0.85).abs() <= 0.03, "linear probe accuracy {acc}");
}

#[test]
fn random_committee_on_biased_panel() {
    let (m, alpha) = (8, 0.75);
    let panel = biased_panel(m, alpha).unwrap();
    let samples: Vec<Sample> = (0..40_000).map(|i| Sample::new(i, vec![0.0], 1, (i % 2) as Label).unwrap()).collect();
    let obs: Vec<Observation> = samples.iter().map(|s| s.obs.clone()).collect();
    let mut ann = PanelAnnotator::new(panel, &samples, 1);
    let decisions = random_committee_baseline(&obs, &mut ann, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let acc = accuracy(decisions.iter().zip(&samples).map(|(d, s)| d.label == s.true_label));
    let expected = alpha + 0.5 * (1.0 - alpha);
    assert!((acc - expected).abs() < 0.01, "{acc} vs {expected}");
}

#[test]
fn perfect_experts_with_point_mass_are_always_right() {
    let panel = ExpertPanel::new(vec![ExpertModel::new("p", [(0, 1.0), (1, 1.0)].into(), Cost::Constant(1.0)).unwrap()])
        .unwrap();
    let data = gen_cluster_data(&ClusterSpec::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Zero weights and a large bias on slot 0 give a point mass on the expert.
    let mut net = Network::zeros(&[2, 2], Head::Softmax).unwrap();
    let bias0 = net.num_params() - 2;
    net.set_param(bias0, 60.0);
    let state = PipelineState::new(Classifier::Tree(DecisionTree::unfitted(1)), net, 1, 1).unwrap();
    let mut ann = PanelAnnotator::new(panel, &data.samples, 3);
    for mode in [Aggregation::Full, Aggregation::Committee { k: 1 }] {
        let m = evaluate(&state, &data.samples, &mut ann, mode, EvalPolicy::Learned, 1, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(m.overall, 1.0);
        assert_eq!(m.disparity, 0.0);
    }
}

#[test]
fn coin_flip_experts_score_one_half() {
    let panel = ExpertPanel::new(vec![ExpertModel::new("c", [(0, 0.5), (1, 0.5)].into(), Cost::Constant(1.0)).unwrap()])
        .unwrap();
    let data = gen_cluster_data(&ClusterSpec { counts: [4000, 4000, 4000], ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    let mut net = Network::zeros(&[2, 2], Head::Softmax).unwrap();
    let bias0 = net.num_params() - 2;
    net.set_param(bias0, 60.0);
    let state = PipelineState::new(Classifier::Tree(DecisionTree::unfitted(1)), net, 1, 1).unwrap();
    let mut ann = PanelAnnotator::new(panel, &data.samples, 3);
    let m = evaluate(&state, &data.samples, &mut ann, Aggregation::Full, EvalPolicy::Learned, 1, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!((m.overall - 0.5).abs() < 0.015, "{}", m.overall);
}

fn perfect_cluster_panel() -> ExpertPanel {
    ExpertPanel::new(vec![
        ExpertModel::new("e1", [(0, 1.0), (1, 1.0)].into(), Cost::Constant(1.0)).unwrap(),
        ExpertModel::new("e2", [(0, 1.0), (1, 1.0)].into(), Cost::Constant(1.0)).unwrap(),
    ])
    .unwrap()
}

#[test]
fn strict_matching_with_full_trust_and_perfect_experts_keeps_accuracy() {
    let seeds = SeedStreams::new(9);
    let data = gen_cluster_data(&ClusterSpec::default(), &mut seeds.rng(Stream::Data)).unwrap();
    let split = split_dataset(&data, 0.8, 500, &mut seeds.rng(Stream::Split)).unwrap();
    let prior: Vec<Observation> = split.prior.iter().map(|s| s.obs.clone()).collect();
    let stream: Vec<Observation> = split.stream.iter().map(|s| s.obs.clone()).collect();
    let table = make_cluster_dsim(0.0).unwrap();
    let mut cfg = Settings::defaults(Task::Cluster).train;
    cfg.prior.epochs = 50;
    let deferrer = Network::new(&[2, 16, 8, 3], Head::Softmax, &mut seeds.rng(Stream::DeferrerInit)).unwrap();
    let state = PipelineState::new(Classifier::Tree(DecisionTree::unfitted(4)), deferrer, 2, 1).unwrap();

    let prior_only = {
        let mut s = state.clone();
        s.deferrer = closed_defer::training::fit_prior_deferrer(
            s.deferrer,
            &prior,
            &table,
            &cfg.prior,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let mut ann = PanelAnnotator::new(perfect_cluster_panel(), &split.test, 5);
        evaluate(&s, &split.test, &mut ann, Aggregation::Full, EvalPolicy::Learned, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .overall
    };
    let mut train_ann = PanelAnnotator::new(perfect_cluster_panel(), &split.stream, 4);
    let (trained, out) =
        strict_matching(state, &prior, &stream, &mut train_ann, &table, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut ann = PanelAnnotator::new(perfect_cluster_panel(), &split.test, 5);
    let final_acc =
        evaluate(&trained, &split.test, &mut ann, Aggregation::Full, EvalPolicy::Learned, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .overall;
    assert!(out.updates > 0);
    assert!(final_acc >= prior_only, "final {final_acc} < prior-only {prior_only}");
}

#[test]
fn prior_fit_with_full_trust_prefers_the_matching_expert() {
    let seeds = SeedStreams::new(3);
    let data = gen_cluster_data(&ClusterSpec::default(), &mut seeds.rng(Stream::Data)).unwrap();
    let obs: Vec<Observation> = data.samples.iter().map(|s| s.obs.clone()).collect();
    let split = split_dataset(&data, 0.8, 500, &mut seeds.rng(Stream::Split)).unwrap();
    let unlabeled: Vec<Observation> = split.prior.iter().map(|s| s.obs.clone()).collect();
    let table = make_cluster_dsim(0.0).unwrap();
    let cfg = Settings::defaults(Task::Cluster).train;
    let deferrer = Network::new(&[2, 16, 8, 3], Head::Softmax, &mut seeds.rng(Stream::DeferrerInit)).unwrap();
    let mut prior = cfg.prior;
    prior.epochs = 100;
    let before = prior_fit_error(&deferrer, &obs, &table).unwrap();
    let fitted =
        closed_defer::training::fit_prior_deferrer(deferrer, &unlabeled, &table, &prior, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
    let orange: Vec<&Observation> = obs.iter().filter(|o| o.group == groups::ORANGE).collect();
    let argmax_e1 = accuracy(orange.iter().map(|o| {
        let d = fitted.forward(&o.features).unwrap();
        d[0] > d[1] && d[0] > d[2]
    }));
    assert!(argmax_e1 >= 0.95, "argmax e1 on {argmax_e1} of orange inputs");
    assert!(prior_fit_error(&fitted, &obs, &table).unwrap() < before);
}

#[test]
fn classifier_weight_grows_under_increasing_cost() {
    let seeds = SeedStreams::new(12);
    let data = gen_cluster_data(&ClusterSpec::default(), &mut seeds.rng(Stream::Data)).unwrap();
    let split = split_dataset(&data, 0.8, 500, &mut seeds.rng(Stream::Split)).unwrap();
    let prior: Vec<Observation> = split.prior.iter().map(|s| s.obs.clone()).collect();
    let stream: Vec<Observation> = split.stream.iter().map(|s| s.obs.clone()).collect();
    let mut cfg: TrainConfig = Settings::defaults(Task::Cluster).train;
    cfg.epochs = 3;
    cfg.prior.epochs = 50;
    cfg.lambda = LambdaSchedule::Linear { per_update: 0.01 };
    let deferrer = Network::new(&[2, 16, 8, 3], Head::Softmax, &mut seeds.rng(Stream::DeferrerInit)).unwrap();
    let state = PipelineState::new(Classifier::Tree(DecisionTree::unfitted(4)), deferrer, 2, 1).unwrap();
    let mut ann = PanelAnnotator::new(make_cluster_experts(), &split.stream, 2);
    let table = make_cluster_dsim(0.4).unwrap();
    let (_, out) = strict_matching(state, &prior, &stream, &mut ann, &table, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let per_epoch: Vec<f64> = out
        .decisions
        .chunks(stream.len())
        .map(|c| c.iter().map(|d| d.classifier_weight).sum::<f64>() / c.len() as f64)
        .collect();
    for w in per_epoch.windows(2) {
        assert!(w[1] >= w[0] - 0.02, "classifier weight fell: {per_epoch:?}");
    }
}

fn quick_cluster() -> Settings {
    let mut s = Settings::defaults(Task::Cluster);
    s.repetitions = 2;
    s.train.prior.epochs = 20;
    s
}

#[test]
fn runs_are_pure_functions_of_seed_and_repetition() {
    let s = quick_cluster();
    let a = run_once(&s, 1).unwrap();
    let b = run_once(&s, 1).unwrap();
    assert_eq!(a, b);
    let spread = Stat::of(&[a.metrics.overall, b.metrics.overall]);
    assert_eq!(spread.std, 0.0);
    assert_ne!(run_once(&s, 0).unwrap().seed, a.seed);
}

#[test]
fn sweep_points_are_reproducible() {
    let mut s = quick_cluster();
    s.sweep = Some(SweepSpec { parameter: "dsim.s".into(), values: vec![0.0, 0.5] });
    let a = run_sweep(&s).unwrap();
    let b = run_sweep(&s).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].summary.value, Some(0.0));
    assert_eq!(a[1].summary.repetitions, 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.runs, y.runs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_partitions_every_sample(
        n in 10usize..400,
        frac in 0.1f64..0.95,
        prior in 0usize..50,
        seed in any::<u64>(),
    ) {
        let spec = ClusterSpec { counts: [n, n, n], ..Default::default() };
        let data = gen_cluster_data(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let expected_test = ((1.0 - frac) * data.len() as f64).round() as usize;
        let result = split_dataset(&data, frac, prior, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        if expected_test + prior > data.len() {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let split = result.unwrap();
        let mut ids: Vec<u64> = split.prior.iter().chain(&split.stream).chain(&split.test).map(|s| s.id()).collect();
        prop_assert_eq!(ids.len(), data.len());
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), data.len());
        prop_assert_eq!(split.test.len(), expected_test);
        prop_assert_eq!(split.prior.len(), prior);
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>()) {
        let spec = ClusterSpec { counts: [20, 20, 30], ..Default::default() };
        let a = gen_cluster_data(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = gen_cluster_data(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
        let cm = CMSpec { samples: 200, ..Default::default() };
        let a = gen_cm_surrogate(&cm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = gen_cm_surrogate(&cm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        let aae = a.samples.iter().filter(|s| s.group() == groups::AAE).count();
        prop_assert_eq!(aae, 72);
    }
}
