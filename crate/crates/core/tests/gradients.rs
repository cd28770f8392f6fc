use closed_defer::experts::{Annotator, Cost, ExpertModel, ExpertPanel, PanelAnnotator};
use closed_defer::model::{CostVector, PredictionVector, Sample};
use closed_defer::nn::{Gradients, Head, Network};
use closed_defer::pipeline::{Classifier, PipelineState};
use closed_defer::training::{classifier_loss, combined_loss, loss_gradients, BatchItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `loss` over every parameter of `net`.
fn numeric_grad(net: &Network, mut loss: impl FnMut(&Network) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.num_params())
        .map(|i| {
            let v = net.param(i);
            probe.set_param(i, v + H);
            let up = loss(&probe);
            probe.set_param(i, v - H);
            let down = loss(&probe);
            probe.set_param(i, v);
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_matches(analytic: &Gradients, numeric: &[f64], what: &str) {
    for (i, n) in numeric.iter().enumerate() {
        let a = analytic.get(i);
        assert!(rel_err(a, *n) < 1e-3, "{what}: param {i} analytic {a} numeric {n}");
    }
}

fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn sigmoid_head_log_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..20 {
        let dim = rng.random_range(2..6);
        let hidden = rng.random_range(2..6);
        let net = Network::new(&[dim, hidden, 1], Head::Sigmoid, &mut rng).unwrap();
        let x = random_input(&mut rng, dim);
        let y = u8::from(rng.random_bool(0.5));
        let trace = net.forward_trace(&x).unwrap();
        let f = trace.output[0];
        let upstream = if y == 1 { -1.0 / f } else { 1.0 / (1.0 - f) };
        let g = net.backward(&trace, &[upstream]).unwrap();
        let num = numeric_grad(&net, |n| classifier_loss(n.predict_prob(&x).unwrap(), y));
        assert_matches(&g, &num, &format!("trial {trial}"));
    }
}

#[test]
fn softmax_head_linear_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..20 {
        let dim = rng.random_range(2..6);
        let out = rng.random_range(2..6);
        let net = Network::new(&[dim, 5, 4, out], Head::Softmax, &mut rng).unwrap();
        let x = random_input(&mut rng, dim);
        let w: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = net.forward_trace(&x).unwrap();
        let g = net.backward(&trace, &w).unwrap();
        let num = numeric_grad(&net, |n| n.forward(&x).unwrap().iter().zip(&w).map(|(p, c)| p * c).sum());
        assert_matches(&g, &num, &format!("trial {trial}"));
    }
}

/// The joint objective, differentiated through both networks at once.
#[test]
fn combined_loss_gradient_for_both_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..20 {
        let dim = 3;
        let experts = rng.random_range(1..4);
        let clf = Network::new(&[dim, 4, 1], Head::Sigmoid, &mut rng).unwrap();
        let def = Network::new(&[dim, 6, experts + 1], Head::Softmax, &mut rng).unwrap();
        let state = PipelineState::new(Classifier::Net(clf), def, experts, 1).unwrap();
        let alpha = rng.random_range(0.1..2.0);
        let lambda = rng.random_range(0.0..1.0);
        let batch: Vec<BatchItem> = (0..4)
            .map(|i| {
                let votes: Vec<u8> = (0..experts).map(|_| u8::from(rng.random_bool(0.5))).collect();
                let costs: Vec<f64> = (0..experts).map(|_| rng.random_range(0.0..2.0)).collect();
                let s = Sample::new(i, random_input(&mut rng, dim), 0, 0).unwrap();
                BatchItem {
                    obs: s.obs,
                    label: u8::from(rng.random_bool(0.5)),
                    y_e: PredictionVector::new(&votes, 0.5).unwrap(),
                    costs: CostVector::new(&costs).unwrap(),
                }
            })
            .collect();
        let (g_def, g_clf) = loss_gradients(&batch, &state, alpha, lambda).unwrap();
        let num_def = numeric_grad(&state.deferrer, |d| {
            let mut s = state.clone();
            s.deferrer = d.clone();
            combined_loss(&batch, &s, alpha, lambda).unwrap()
        });
        assert_matches(&g_def, &num_def, &format!("deferrer, trial {trial}"));
        let Classifier::Net(clf) = &state.classifier else { unreachable!() };
        let num_clf = numeric_grad(clf, |c| {
            let mut s = state.clone();
            s.classifier = Classifier::Net(c.clone());
            combined_loss(&batch, &s, alpha, lambda).unwrap()
        });
        assert_matches(&g_clf.unwrap(), &num_clf, &format!("classifier, trial {trial}"));
    }
}

#[test]
fn annotator_costs_reach_the_cost_term() {
    let panel = ExpertPanel::new(vec![
        ExpertModel::new("a", [(0, 1.0)].into(), Cost::Constant(1.0)).unwrap(),
        ExpertModel::new("b", [(0, 1.0)].into(), Cost::Constant(2.5)).unwrap(),
    ])
    .unwrap();
    let s = Sample::new(0, vec![0.0], 0, 1).unwrap();
    let ann = PanelAnnotator::new(panel, std::slice::from_ref(&s), 0);
    assert_eq!(ann.costs(&s.obs).as_slice(), &[1.0, 2.5, 0.0]);
}
