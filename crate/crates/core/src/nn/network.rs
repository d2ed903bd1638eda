//! Dense ReLU networks with Bernoulli dropout on layer inputs.
//!
//! A dropout mask realizes one draw of the weights `ω = θ·diag(ε)`: zeroing
//! input unit `i` of a layer is the same as zeroing column `i` of its weight
//! matrix. Surviving inputs are scaled by `1 / keep_prob` (inverted dropout)
//! in both training and Monte Carlo prediction passes.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{sparse_support, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Where dropout masks are applied and with which keep probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub keep_prob: f64,
    /// Also drop the raw input features, not only hidden units.
    #[serde(default)]
    pub drop_inputs: bool,
}

impl DropoutConfig {
    /// `dropout_rate` is the drop probability.
    pub fn from_rate(dropout_rate: f64, drop_inputs: bool) -> Result<Self> {
        let cfg = DropoutConfig {
            keep_prob: 1.0 - dropout_rate,
            drop_inputs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_keep_prob(self.keep_prob)
    }
}

fn validate_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )))
    }
}

/// One affine layer, `z = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for a layer with {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Dense { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Variational parameters θ of the dropout network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layers: Vec<Dense>,
    activation: Activation,
    dropout: DropoutConfig,
}

/// Binary dropout masks, one vector per masked layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    pub units: Vec<Vec<bool>>,
}

/// Draws an independent Bernoulli(`keep_prob`) entry for every unit.
pub fn sample_mask<R: Rng + ?Sized>(
    rng: &mut R,
    layer_widths: &[usize],
    keep_prob: f64,
) -> Result<DropoutMask> {
    validate_keep_prob(keep_prob)?;
    let units = layer_widths
        .iter()
        .map(|&w| {
            if keep_prob == 1.0 {
                vec![true; w]
            } else {
                (0..w).map(|_| rng.random::<f64>() < keep_prob).collect()
            }
        })
        .collect();
    Ok(DropoutMask { keep_prob, units })
}

impl DropoutMask {
    pub fn all_ones(layer_widths: &[usize]) -> Self {
        DropoutMask {
            keep_prob: 1.0,
            units: layer_widths.iter().map(|&w| vec![true; w]).collect(),
        }
    }
}

/// Softmax output of the network; strictly positive and normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "probabilities must be strictly positive: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// Max-subtracted softmax. Entries that underflow are floored at the
    /// smallest normal `f64` so `log p` stays finite.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p = (*p / total).max(f64::MIN_POSITIVE);
        }
        ProbVector(probs)
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        ProbVector(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// T stochastic forward passes for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    samples: Vec<ProbVector>,
}

impl PredictiveSamples {
    pub fn new(samples: Vec<ProbVector>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidConfig("need at least one sample".into()));
        };
        let c = first.len();
        if samples.iter().any(|s| s.len() != c) {
            return Err(Error::Shape("samples disagree on class count".into()));
        }
        Ok(PredictiveSamples { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.samples[0].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProbVector> {
        self.samples.iter()
    }

    /// MC estimate of the predictive distribution.
    pub fn mean(&self) -> ProbVector {
        let t = self.samples.len() as f64;
        let mut mean = vec![0.0; self.classes()];
        for s in &self.samples {
            for (m, p) in mean.iter_mut().zip(s.as_slice()) {
                *m += p;
            }
        }
        for m in &mut mean {
            *m /= t;
        }
        ProbVector::from_raw(mean)
    }
}

/// Parameter gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Weights then biases, layer by layer; same order as
    /// [`NetworkParams::flat_get`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.as_slice().iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0)
        })
    }
}

/// Intermediate values of one forward pass kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Masked and rescaled input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last one holds the logits.
    preacts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.preacts.last().expect("network has layers")
    }

    pub fn preacts(&self) -> &[Vec<f64>] {
        &self.preacts
    }

    fn into_logits(mut self) -> Vec<f64> {
        self.preacts.pop().expect("network has layers")
    }
}

impl NetworkParams {
    pub fn new(layers: Vec<Dense>, activation: Activation, dropout: DropoutConfig) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} units but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        dropout.validate()?;
        Ok(NetworkParams {
            layers,
            activation,
            dropout,
        })
    }

    /// Random initialization: He-uniform for ReLU, Glorot-uniform for tanh;
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        dropout: DropoutConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0] as f64, w[1] as f64);
                let limit = match activation {
                    Activation::Relu => (6.0 / fan_in).sqrt(),
                    Activation::Tanh => (6.0 / (fan_in + fan_out)).sqrt(),
                };
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let data = (0..w[0] * w[1]).map(|_| dist.sample(rng)).collect();
                Dense {
                    weights: Matrix::new(w[1], w[0], data).expect("sized"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        NetworkParams::new(layers, activation, dropout)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> DropoutConfig {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    /// Widths of the layer inputs that carry a dropout mask.
    pub fn mask_widths(&self) -> Vec<usize> {
        let skip = usize::from(!self.dropout.drop_inputs);
        self.layers.iter().skip(skip).map(Dense::inputs).collect()
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutMask {
        sample_mask(rng, &self.mask_widths(), self.dropout.keep_prob).expect("validated keep_prob")
    }

    fn mask_index(&self, layer: usize) -> Option<usize> {
        if self.dropout.drop_inputs {
            Some(layer)
        } else {
            layer.checked_sub(1)
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weights.as_slice().len();
            if index < nw {
                return (li, true, index);
            }
            index -= nw;
            if index < l.bias.len() {
                return (li, false, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Reads parameter `index` in [`ParamGrads::flatten`] order.
    pub fn flat_get(&self, index: usize) -> f64 {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights.as_slice()[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights.as_mut_slice()[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        let widths = self.mask_widths();
        let ok = mask.units.len() == widths.len()
            && mask.units.iter().zip(&widths).all(|(u, &w)| u.len() == w);
        if !ok {
            return Err(Error::Shape(format!(
                "mask widths {:?} do not match network mask widths {widths:?}",
                mask.units.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        validate_keep_prob(mask.keep_prob)
    }

    /// Forward pass recording what backprop needs. `first_preact`, when
    /// given, replaces the first layer's affine map (valid only when the
    /// raw inputs are not masked).
    fn forward_impl(
        &self,
        mask: Option<&DropoutMask>,
        x: &[f64],
        first_preact: Option<&[f64]>,
    ) -> Trace {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut input: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                preacts[l - 1]
                    .iter()
                    .map(|&z| self.activation.apply(z))
                    .collect()
            };
            if let (Some(mask), Some(mi)) = (mask, self.mask_index(l)) {
                let scale = 1.0 / mask.keep_prob;
                for (v, &keep) in input.iter_mut().zip(&mask.units[mi]) {
                    *v = if keep { *v * scale } else { 0.0 };
                }
            }
            let z = match (l, first_preact) {
                (0, Some(pre)) => pre.to_vec(),
                _ => {
                    let mut z = vec![0.0; layer.outputs()];
                    layer.weights.affine_into(&input, &layer.bias, &mut z);
                    z
                }
            };
            inputs.push(input);
            preacts.push(z);
        }
        Trace { inputs, preacts }
    }

    pub fn forward_traced(&self, mask: &DropoutMask, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        self.check_mask(mask)?;
        Ok(self.forward_impl(Some(mask), x, None))
    }

    /// One stochastic pass under `mask`; returns logits and softmax.
    pub fn forward_stochastic(
        &self,
        mask: &DropoutMask,
        x: &[f64],
    ) -> Result<(Vec<f64>, ProbVector)> {
        let trace = self.forward_traced(mask, x)?;
        let probs = ProbVector::softmax(trace.logits());
        Ok((trace.into_logits(), probs))
    }

    /// Dropout-free pass (every unit kept, no rescaling).
    pub fn forward_deterministic(&self, x: &[f64]) -> Result<(Vec<f64>, ProbVector)> {
        self.check_input(x)?;
        let trace = self.forward_impl(None, x, None);
        let probs = ProbVector::softmax(trace.logits());
        Ok((trace.into_logits(), probs))
    }

    /// Monte Carlo dropout: `samples` fresh masks, one pass each.
    pub fn mc_predict<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> Result<PredictiveSamples> {
        if samples == 0 {
            return Err(Error::InvalidConfig(
                "MC sample count must be at least 1".into(),
            ));
        }
        self.check_input(x)?;
        let first = if self.dropout.drop_inputs {
            None
        } else {
            let l0 = &self.layers[0];
            let mut z = vec![0.0; l0.outputs()];
            l0.weights.affine_into(x, &l0.bias, &mut z);
            Some(z)
        };
        let out = (0..samples)
            .map(|_| {
                let mask = self.sample_mask(rng);
                let trace = self.forward_impl(Some(&mask), x, first.as_deref());
                ProbVector::softmax(trace.logits())
            })
            .collect();
        PredictiveSamples::new(out)
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits` for a traced pass.
    pub fn backward_into(
        &self,
        trace: &Trace,
        mask: &DropoutMask,
        logit_grad: &[f64],
        grads: &mut ParamGrads,
    ) {
        let mut delta = logit_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let input = &trace.inputs[l];
            let nonzero = sparse_support(input);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = g.weights.row_mut(o);
                match &nonzero {
                    Some(idx) => {
                        for &i in idx {
                            row[i] += d * input[i];
                        }
                    }
                    None => {
                        for (gw, &xi) in row.iter_mut().zip(input) {
                            *gw += d * xi;
                        }
                    }
                }
                g.bias[o] += d;
            }
            if l == 0 {
                break;
            }
            let mut upstream = vec![0.0; layer.inputs()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (u, &w) in upstream.iter_mut().zip(layer.weights.row(o)) {
                    *u += w * d;
                }
            }
            if let Some(mi) = self.mask_index(l) {
                let scale = 1.0 / mask.keep_prob;
                for (u, &keep) in upstream.iter_mut().zip(&mask.units[mi]) {
                    *u = if keep { *u * scale } else { 0.0 };
                }
            }
            delta = upstream
                .iter()
                .zip(&trace.preacts[l - 1])
                .map(|(&u, &z)| u * self.activation.derivative(z))
                .collect();
        }
    }

    /// Gradient of an upstream scalar w.r.t. every parameter, given its
    /// gradient w.r.t. the logits of the pass under `mask`.
    pub fn backprop(
        &self,
        mask: &DropoutMask,
        x: &[f64],
        logit_grad: &[f64],
    ) -> Result<ParamGrads> {
        if logit_grad.len() != self.classes() {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries for {} classes",
                logit_grad.len(),
                self.classes()
            )));
        }
        let trace = self.forward_traced(mask, x)?;
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(&trace, mask, logit_grad, &mut grads);
        Ok(grads)
    }
}
