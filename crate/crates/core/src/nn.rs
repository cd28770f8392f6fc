//! Small dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use a rectifier. The output head is one of identity, a single
//! sigmoid (classifier) or an m-way softmax (deferrer). Gradients are computed
//! with respect to the head output, so callers supply `dLoss/dOutput` and get
//! back parameter gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SimplexVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Identity,
    Sigmoid,
    Softmax,
}

impl Head {
    fn name(self) -> &'static str {
        match self {
            Head::Identity => "identity",
            Head::Sigmoid => "sigmoid",
            Head::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o];
            out.push(z);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
    head: Head,
}

/// Activations cached by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l` (post-rectifier for `l > 0`).
    inputs: Vec<Vec<f64>>,
    /// Head output.
    pub output: Vec<f64>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Network {
    /// Builds a network with weights drawn uniformly from `±1/sqrt(fan_in)`.
    ///
    /// `layer_sizes` lists the input width, hidden widths and output width.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        Self::build(layer_sizes, head, |fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..=bound)
        })
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], head: Head) -> Result<Self> {
        Self::build(layer_sizes, head, |_| 0.0)
    }

    fn build(layer_sizes: &[usize], head: Head, mut init: impl FnMut(usize) -> f64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let out = *layer_sizes.last().unwrap();
        if head == Head::Sigmoid && out != 1 {
            return Err(Error::config("sigmoid head needs exactly one output"));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| init(inputs)).collect(),
                    bias: (0..outputs).map(|_| init(inputs)).collect(),
                }
            })
            .collect();
        Ok(Network { layers, head })
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Scalar probability of a sigmoid-headed network.
    pub fn predict_prob(&self, x: &[f64]) -> Result<f64> {
        debug_assert_eq!(self.head, Head::Sigmoid);
        Ok(self.forward(x)?[0])
    }

    /// Distribution over slots of a softmax-headed network.
    pub fn predict_simplex(&self, x: &[f64]) -> Result<SimplexVector> {
        debug_assert_eq!(self.head, Head::Softmax);
        Ok(SimplexVector::from_trusted(self.forward(x)?))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.len() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&current, &mut z);
            inputs.push(current);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = z;
        }
        let output = match self.head {
            Head::Identity => current,
            Head::Sigmoid => vec![sigmoid(current[0])],
            Head::Softmax => softmax(&current),
        };
        Ok(Trace { inputs, output })
    }

    /// Parameter gradients given `upstream = dLoss/dOutput` for the head output
    /// recorded in `trace`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_backward(trace, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * gradient` into `grads`; used to sum over a batch without
    /// allocating a gradient per sample.
    pub fn accumulate_backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), got: upstream.len() });
        }
        let out = &trace.output;
        // Gradient with respect to the last pre-activation.
        let mut delta: Vec<f64> = match self.head {
            Head::Identity => upstream.to_vec(),
            Head::Sigmoid => vec![upstream[0] * out[0] * (1.0 - out[0])],
            Head::Softmax => {
                let dot: f64 = out.iter().zip(upstream).map(|(p, g)| p * g).sum();
                out.iter().zip(upstream).map(|(p, g)| p * (g - dot)).collect()
            }
        };
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            for o in 0..layer.outputs {
                let d = delta[o] * scale;
                gb[o] += d;
                if d != 0.0 {
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    if delta[o] == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += delta[o] * w);
                }
                // Rectifier derivative: the cached input is the post-activation.
                prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if index < layer.weights.len() {
                return (l, true, index);
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return (l, false, index);
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: layer by layer, weights before biases.
    pub fn param(&self, index: usize) -> f64 {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Plain-text checkpoint: a header with the head and layer sizes, then
    /// each layer's weight rows followed by its bias row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("network v1\n");
        s.push_str(&format!("head {}\n", self.head.name()));
        let sizes: Vec<String> = self.layer_sizes().iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("layers {}\n", sizes.join(" ")));
        for layer in &self.layers {
            for row in layer.weights.chunks(layer.inputs) {
                s.push_str(&join(row));
                s.push('\n');
            }
            s.push_str(&join(&layer.bias));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse { line: 0, message: format!("missing {what}") })
        };
        let (line, magic) = next("header")?;
        if magic != "network v1" {
            return Err(Error::Parse { line, message: format!("unexpected header {magic:?}") });
        }
        let (line, head_line) = next("head")?;
        let head = match head_line.strip_prefix("head ") {
            Some("identity") => Head::Identity,
            Some("sigmoid") => Head::Sigmoid,
            Some("softmax") => Head::Softmax,
            _ => return Err(Error::Parse { line, message: format!("bad head line {head_line:?}") }),
        };
        let (line, sizes_line) = next("layers")?;
        let sizes = sizes_line
            .strip_prefix("layers ")
            .ok_or_else(|| Error::Parse { line, message: "expected layers".into() })?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let mut net = Network::zeros(&sizes, head)?;
        for layer in &mut net.layers {
            for o in 0..layer.outputs {
                let (line, row) = next("weight row")?;
                let values = parse_row(row, layer.inputs, line)?;
                layer.weights[o * layer.inputs..(o + 1) * layer.inputs].copy_from_slice(&values);
            }
            let (line, row) = next("bias row")?;
            layer.bias = parse_row(row, layer.outputs, line)?;
        }
        Ok(net)
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_row(row: &str, expected: usize, line: u64) -> Result<Vec<f64>> {
    let values = row
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse { line, message: e.to_string() })?;
    if values.len() != expected {
        return Err(Error::Parse {
            line,
            message: format!("expected {expected} values, found {}", values.len()),
        });
    }
    Ok(values)
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().zip(&self.bias).flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Flat access in the same order as [`Network::param`].
    pub fn get(&self, index: usize) -> f64 {
        *self.iter().nth(index).expect("gradient index out of range")
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += s * b);
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `p <- p - lr * g`.
    Sgd,
    /// First/second-moment update with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    first: Option<Gradients>,
    second: Option<Gradients>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(OptimizerState { kind, lr, step: 0, first: None, second: None })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `net`. Non-finite gradients abort with
    /// [`Error::Numeric`] and leave the network untouched.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads.weights.iter().zip(&grads.bias)) {
                    layer.weights.iter_mut().zip(gw).for_each(|(p, g)| *p -= self.lr * g);
                    layer.bias.iter_mut().zip(gb).for_each(|(p, g)| *p -= self.lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let first = self.first.get_or_insert_with(|| Gradients::zeros_like(net));
                let second = self.second.get_or_insert_with(|| Gradients::zeros_like(net));
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let mut m_it = first.iter_mut();
                let mut v_it = second.iter_mut();
                let mut g_it = grads.iter();
                for layer in &mut net.layers {
                    for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                        let g = *g_it.next().unwrap();
                        let m = m_it.next().unwrap();
                        let v = v_it.next().unwrap();
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        if !net.all_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}
