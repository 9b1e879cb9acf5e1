//! Dense network math: layers, softmax cross-entropy, manual backprop, and
//! a central-difference gradient checker.
//!
//! Weights use the `(out, in)` convention with `y = W x + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairdropout::FairDropoutConfig;
use crate::memprobe::NeuronMaskSet;
use crate::seed;
use crate::tensor::Tensor;

/// Fair dropout evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Memorizing neurons allocated to the example are kept.
    Train,
    /// Memorizing neurons are dropped.
    Test,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Test => "test",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseRecord", into = "DenseRecord")]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub layer_index: usize,
}

#[derive(Serialize, Deserialize)]
struct DenseRecord {
    layer_index: usize,
    #[serde(rename = "in")]
    input: usize,
    out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<DenseLayer> for DenseRecord {
    fn from(d: DenseLayer) -> Self {
        DenseRecord {
            layer_index: d.layer_index,
            input: d.in_width(),
            out: d.out_width(),
            weights: d.weights.into_data(),
            bias: d.bias.into_data(),
        }
    }
}

impl TryFrom<DenseRecord> for DenseLayer {
    type Error = Error;

    fn try_from(r: DenseRecord) -> Result<Self> {
        DenseLayer::new(
            Tensor::matrix(r.out, r.input, r.weights)?,
            Tensor::vector(r.bias),
            r.layer_index,
        )
    }
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, layer_index: usize) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Config("dense weights must be a matrix".into()));
        }
        let (out, input) = (weights.shape()[0], weights.shape()[1]);
        if out == 0 || input == 0 {
            return Err(Error::Config("dense layer widths must be >= 1".into()));
        }
        if bias.len() != out {
            return Err(Error::Dimension {
                context: "dense bias",
                expected: out,
                actual: bias.len(),
            });
        }
        Ok(DenseLayer {
            weights,
            bias: Tensor::vector(bias.into_data()),
            layer_index,
        })
    }

    /// Uniform Glorot initialization with zero bias.
    pub fn init(input: usize, out: usize, layer_index: usize, rng: &mut impl Rng) -> Result<Self> {
        let s = (6.0 / (input + out) as f64).sqrt();
        let w = (0..input * out).map(|_| rng.random_range(-s..s)).collect();
        Self::new(
            Tensor::matrix(out, input, w)?,
            Tensor::zeros(vec![out]),
            layer_index,
        )
    }

    pub fn in_width(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        let w = self.weights.data();
        let n = self.in_width();
        for (j, (o, b)) in out.iter_mut().zip(self.bias.data()).enumerate() {
            let row = &w[j * n..(j + 1) * n];
            *o = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `W x + b` for a single row or a batch of rows.
pub fn dense_forward(x: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    if x.row_len() != layer.in_width() || x.rank() == 0 || x.rank() > 2 {
        return Err(Error::Dimension {
            context: "dense input",
            expected: layer.in_width(),
            actual: x.row_len(),
        });
    }
    let out_w = layer.out_width();
    let mut out = vec![0.0; x.rows() * out_w];
    for (i, o) in out.chunks_mut(out_w).enumerate() {
        layer.forward_row(x.row(i), o);
    }
    let shape = if x.rank() == 1 {
        vec![out_w]
    } else {
        vec![x.rows(), out_w]
    };
    Tensor::new(shape, out)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Cross-entropy of `softmax(logits)` against `label`, with the logit
/// gradient `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index {
            context: "class label",
            index: label,
            len: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - m);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit, ties going to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReluLayer {
    #[serde(rename = "in")]
    pub input: usize,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Relu(ReluLayer),
    FairDropout(FairDropoutConfig),
}

impl Layer {
    pub fn relu(width: usize) -> Self {
        Layer::Relu(ReluLayer {
            input: width,
            out: width,
        })
    }

    fn widths(&self) -> (usize, usize) {
        match self {
            Layer::Dense(d) => (d.in_width(), d.out_width()),
            Layer::Relu(r) => (r.input, r.out),
            Layer::FairDropout(c) => (c.width(), c.width()),
        }
    }
}

/// Per-example context for a forward or backward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pass<'a> {
    /// Needed by train-mode fair dropout.
    pub example_id: Option<u64>,
    /// Hidden neurons forced to zero.
    pub mask: Option<&'a NeuronMaskSet>,
}

impl<'a> Pass<'a> {
    pub fn example(id: u64) -> Self {
        Pass {
            example_id: Some(id),
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: &'a NeuronMaskSet) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrad {
    pub layer_index: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients for every dense layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub layers: Vec<DenseGrad>,
}

impl GradientRecord {
    pub fn zeros_like(model: &Model) -> Self {
        GradientRecord {
            layers: model
                .dense_layers()
                .map(|d| DenseGrad {
                    layer_index: d.layer_index,
                    weights: Tensor::zeros(d.weights.shape().to_vec()),
                    bias: Tensor::zeros(d.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientRecord, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }
}

/// Activations recorded by a forward pass.
struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    /// Keep masks for layers whose output was zeroed.
    keeps: Vec<Option<Vec<bool>>>,
}

/// An ordered layer stack with an explicit fair dropout mode. The last
/// layer must be the dense classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord")]
pub struct Model {
    layers: Vec<Layer>,
    mode: Mode,
    seed: u64,
}

#[derive(Deserialize)]
struct ModelRecord {
    layers: Vec<Layer>,
    mode: Mode,
    seed: u64,
}

impl TryFrom<ModelRecord> for Model {
    type Error = Error;

    fn try_from(r: ModelRecord) -> Result<Self> {
        let mut m = Model::new(r.layers, r.seed)?;
        m.mode = r.mode;
        Ok(m)
    }
}

impl Model {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let model = Model {
            layers,
            mode: Mode::Train,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    /// A ReLU MLP with Glorot-initialized weights.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Layer::Dense(DenseLayer::init(width, h, i, &mut rng)?));
            layers.push(Layer::relu(h));
            width = h;
        }
        layers.push(Layer::Dense(DenseLayer::init(
            width,
            classes,
            hidden.len(),
            &mut rng,
        )?));
        Model::new(layers, seed)
    }

    fn validate(&self) -> Result<()> {
        let Some(Layer::Dense(_)) = self.layers.last() else {
            return Err(Error::Config("model must end with a dense head".into()));
        };
        let mut seen = std::collections::BTreeSet::new();
        let mut prev: Option<usize> = None;
        for layer in &self.layers {
            let (i, o) = layer.widths();
            if i == 0 || o == 0 {
                return Err(Error::Config("layer widths must be >= 1".into()));
            }
            if let Some(p) = prev {
                if p != i {
                    return Err(Error::Dimension {
                        context: "layer chain",
                        expected: p,
                        actual: i,
                    });
                }
            }
            match layer {
                Layer::Dense(d) => {
                    if !seen.insert(d.layer_index) {
                        return Err(Error::Config(format!(
                            "duplicate layer_index {}",
                            d.layer_index
                        )));
                    }
                }
                Layer::Relu(r) if r.input != r.out => {
                    return Err(Error::Config("relu must preserve width".into()));
                }
                Layer::FairDropout(c) => c.validate()?,
                _ => {}
            }
            prev = Some(o);
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(&self, mode: Mode) -> Model {
        let mut m = self.clone();
        m.mode = mode;
        m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].widths().0
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.widths().1).unwrap_or(0)
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn dense_layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    /// Dense layers whose outputs may be masked: every dense layer but the head.
    pub fn hidden_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        let n = self.dense_layers().count();
        self.dense_layers().take(n.saturating_sub(1))
    }

    pub fn hidden_neuron_count(&self) -> usize {
        self.hidden_layers().map(|d| d.out_width()).sum()
    }

    pub fn fair_dropout(&self) -> Option<&FairDropoutConfig> {
        self.layers.iter().find_map(|l| match l {
            Layer::FairDropout(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.dense_layers().map(|d| d.param_count()).sum()
    }

    /// Hash of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for d in self.dense_layers() {
            for v in d.weights.data().iter().chain(d.bias.data()) {
                h = seed::mix64(h ^ v.to_bits());
            }
        }
        h
    }

    fn head_position(&self) -> usize {
        self.layers.len() - 1
    }

    fn trace(&self, x: &[f64], pass: Pass<'_>) -> Result<Trace> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                context: "model input",
                expected: self.input_width(),
                actual: x.len(),
            });
        }
        let head = self.head_position();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut keeps = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (pos, layer) in self.layers.iter().enumerate() {
            let input = acts.last().expect("input present");
            let (out, keep) = match layer {
                Layer::Dense(d) => {
                    let mut out = vec![0.0; d.out_width()];
                    d.forward_row(input, &mut out);
                    let keep = match pass.mask {
                        Some(mask) if pos != head => mask.keep_mask(d.layer_index, d.out_width()),
                        _ => None,
                    };
                    if let Some(k) = &keep {
                        zero_dropped(&mut out, k);
                    }
                    (out, keep)
                }
                Layer::Relu(_) => (
                    input
                        .iter()
                        .map(|&v| if v > 0.0 { v } else { 0.0 })
                        .collect(),
                    None,
                ),
                Layer::FairDropout(c) => {
                    let keep = self.fair_keep(c, pass)?;
                    let mut out = input.clone();
                    zero_dropped(&mut out, &keep);
                    (out, Some(keep))
                }
            };
            acts.push(out);
            keeps.push(keep);
        }
        Ok(Trace { acts, keeps })
    }

    fn fair_keep(&self, c: &FairDropoutConfig, pass: Pass<'_>) -> Result<Vec<bool>> {
        match self.mode {
            Mode::Test => c.keep_mask(Mode::Test, None),
            Mode::Train => {
                let id = pass.example_id.ok_or(Error::MissingExampleId)?;
                c.keep_mask(Mode::Train, Some(&c.allocate(id)))
            }
        }
    }

    /// Logits for one example.
    pub fn forward(&self, x: &[f64], pass: Pass<'_>) -> Result<Vec<f64>> {
        Ok(self.trace(x, pass)?.acts.pop().expect("logits"))
    }

    pub fn predict(&self, x: &[f64], pass: Pass<'_>) -> Result<usize> {
        Ok(argmax(&self.forward(x, pass)?))
    }

    pub fn loss(&self, x: &[f64], label: usize, pass: Pass<'_>) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.forward(x, pass)?, label)?.0)
    }

    /// Add `scale * dL/dθ` for one example into `grads`; returns the loss.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        label: usize,
        pass: Pass<'_>,
        scale: f64,
        grads: &mut GradientRecord,
    ) -> Result<f64> {
        let trace = self.trace(x, pass)?;
        let (loss, mut g) = softmax_cross_entropy(trace.acts.last().expect("logits"), label)?;
        let mut slot = grads.layers.len();
        for (pos, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[pos];
            if let Some(keep) = &trace.keeps[pos] {
                zero_dropped(&mut g, keep);
            }
            match layer {
                Layer::Dense(d) => {
                    slot -= 1;
                    let rec = &mut grads.layers[slot];
                    let n = d.in_width();
                    let w = d.weights.data();
                    let gw = rec.weights.data_mut();
                    let gb = rec.bias.data_mut();
                    let mut g_in = vec![0.0; n];
                    for (j, &gj) in g.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        let sg = scale * gj;
                        gb[j] += sg;
                        for (gwi, xi) in gw[j * n..(j + 1) * n].iter_mut().zip(input) {
                            *gwi += sg * xi;
                        }
                        if pos > 0 {
                            for (gi, wi) in g_in.iter_mut().zip(&w[j * n..(j + 1) * n]) {
                                *gi += gj * wi;
                            }
                        }
                    }
                    g = g_in;
                }
                Layer::Relu(_) => {
                    for (gi, &xi) in g.iter_mut().zip(input) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                // keep mask already applied above
                Layer::FairDropout(_) => {}
            }
        }
        Ok(loss)
    }

    /// Loss and parameter gradients for one example.
    pub fn loss_and_gradient(
        &self,
        x: &[f64],
        label: usize,
        pass: Pass<'_>,
    ) -> Result<(f64, GradientRecord)> {
        let mut grads = GradientRecord::zeros_like(self);
        let loss = self.accumulate_gradient(x, label, pass, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Flat view of every parameter, weights before bias per layer.
    fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for d in self.dense_layers_mut() {
            let nw = d.weights.len();
            if index < nw {
                return Some(&mut d.weights.data_mut()[index]);
            }
            index -= nw;
            let nb = d.bias.len();
            if index < nb {
                return Some(&mut d.bias.data_mut()[index]);
            }
            index -= nb;
        }
        None
    }
}

fn zero_dropped(v: &mut [f64], keep: &[bool]) {
    for (x, &k) in v.iter_mut().zip(keep) {
        if !k {
            *x = 0.0;
        }
    }
}

/// Exact reverse-mode gradient of the cross-entropy loss for one example,
/// in the model's current mode.
pub fn model_backward(
    model: &Model,
    x: &[f64],
    label: usize,
    pass: Pass<'_>,
) -> Result<GradientRecord> {
    Ok(model.loss_and_gradient(x, label, pass)?.1)
}

/// Largest relative disagreement between backprop and central differences,
/// `|a - n| / max(1e-8, |a| + |n|)`, over every parameter.
pub fn finite_difference_check(
    model: &Model,
    x: &[f64],
    label: usize,
    pass: Pass<'_>,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let grads = model_backward(model, x, label, pass)?;
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
        .collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i).expect("parameter in range");
        *probe.param_mut(i).unwrap() = orig + epsilon;
        let up = probe.loss(x, label, pass)?;
        *probe.param_mut(i).unwrap() = orig - epsilon;
        let down = probe.loss(x, label, pass)?;
        *probe.param_mut(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
