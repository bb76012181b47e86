//! Feed-forward classifier with hand-written backprop.
//!
//! Hidden layers are `act(x W^T + b)`; the last layer is affine and produces
//! logits. The training objective on a batch is
//!
//! ```text
//! mean_i H(target_i, softmax(z_i)) + reg_weight * KL(uniform || mean_i softmax(z_i))
//! ```
//!
//! where the second term is [`crate::refurbish::uniformity_reg`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::refurbish::uniformity_reg;
use crate::simplex::SoftLabel;

/// Floor applied to predicted probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
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
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Validation(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
    activation: Activation,
    class_count: usize,
}

impl MlpParams {
    /// Validates layer chaining and that the last layer emits `class_count` logits.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, class_count: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} but {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) || !l.weight.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let last = layers.last().unwrap().out_dim();
        if last != class_count {
            return Err(Error::Shape(format!(
                "final layer emits {last} logits for {class_count} classes"
            )));
        }
        Ok(Self {
            layers,
            activation,
            class_count,
        })
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let dims = layer_dims(input_dim, hidden, class_count);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Dense {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self {
            layers,
            activation,
            class_count,
        }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], class_count: usize, activation: Activation) -> Self {
        let dims = layer_dims(input_dim, hidden, class_count);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layers,
            activation,
            class_count,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn flat_slot(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if k < nw {
                return &mut l.weight.as_mut_slice()[k];
            }
            k -= nw;
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Same layer structure and activation.
    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.activation == other.activation
            && self.class_count == other.class_count
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim())
    }
}

fn layer_dims(input_dim: usize, hidden: &[usize], class_count: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(class_count);
    dims
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer; the last one holds the logits.
    pre: Vec<Matrix>,
}

fn affine(x: &Matrix, layer: &Dense) -> Matrix {
    let (b, out, inp) = (x.rows(), layer.out_dim(), layer.in_dim());
    let mut z = Matrix::zeros(b, out);
    let w = layer.weight.as_slice();
    for r in 0..b {
        let xr = x.row(r);
        let zr = z.row_mut(r);
        for (o, zo) in zr.iter_mut().enumerate() {
            let wr = &w[o * inp..(o + 1) * inp];
            *zo = layer.bias[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    z
}

fn check_input(params: &MlpParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn forward_trace(params: &MlpParams, x: &Matrix) -> Trace {
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    inputs.push(x.clone());
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&inputs[i], layer);
        if i + 1 < n {
            let mut a = z.clone();
            a.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = params.activation.apply(*v));
            inputs.push(a);
        }
        pre.push(z);
    }
    Trace { inputs, pre }
}

/// Logits for a batch, `batch x C`.
pub fn forward(params: &MlpParams, x_batch: &Matrix) -> Result<Matrix> {
    check_input(params, x_batch)?;
    let logits = forward_trace(params, x_batch).pre.pop().expect("non-empty");
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(logits)
}

/// Max-subtracted softmax of one logit row.
pub fn softmax(logits: &[f64]) -> SoftLabel {
    SoftLabel::normalized(softmax_vec(logits))
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax_vec(logits.row(r)));
    }
    out
}

/// Class probabilities for every row of `x`.
pub fn predict_probs(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    Ok(softmax_rows(&forward(params, x)?))
}

/// `-sum_c target_c * ln(max(pred_c, LOG_EPS))`.
pub fn soft_cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    -pred
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(p, t)| t * p.max(LOG_EPS).ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed; it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Validation(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    velocity: Gradients,
}

impl OptState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
        }
    }
}

fn check_targets(params: &MlpParams, x: &Matrix, targets: &[SoftLabel]) -> Result<()> {
    check_input(params, x)?;
    if targets.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            x.rows()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.classes() != params.class_count) {
        return Err(Error::Shape(format!(
            "target over {} classes, network has {}",
            t.classes(),
            params.class_count
        )));
    }
    Ok(())
}

/// Batch objective without weight decay.
pub fn batch_loss(params: &MlpParams, x: &Matrix, targets: &[SoftLabel], reg_weight: f64) -> Result<f64> {
    check_targets(params, x, targets)?;
    let probs = softmax_rows(&forward_trace(params, x).pre.pop().unwrap());
    Ok(objective_value(&probs, targets, reg_weight))
}

fn objective_value(probs: &Matrix, targets: &[SoftLabel], reg_weight: f64) -> f64 {
    let b = probs.rows();
    if b == 0 {
        return 0.0;
    }
    let ce: f64 = (0..b)
        .map(|r| soft_cross_entropy(probs.row(r), targets[r].probs()))
        .sum::<f64>()
        / b as f64;
    if reg_weight == 0.0 {
        return ce;
    }
    ce + reg_weight * uniformity_reg(&column_mean(probs))
}

fn column_mean(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let n = m.rows() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Objective value and its gradient. Targets are constants.
pub fn loss_and_grad(
    params: &MlpParams,
    x: &Matrix,
    targets: &[SoftLabel],
    reg_weight: f64,
) -> Result<(f64, Gradients)> {
    check_targets(params, x, targets)?;
    let mut grads = Gradients::zeros_like(params);
    let b = x.rows();
    if b == 0 {
        return Ok((0.0, grads));
    }
    let mut trace = forward_trace(params, x);
    let probs = softmax_rows(trace.pre.last().unwrap());
    let loss = objective_value(&probs, targets, reg_weight);
    let c = params.class_count;
    let inv_b = 1.0 / b as f64;

    // dL/dz for the logits.
    let mut delta = Matrix::zeros(b, c);
    for r in 0..b {
        let p = probs.row(r);
        let t = targets[r].probs();
        for k in 0..c {
            delta.set(r, k, (p[k] - t[k]) * inv_b);
        }
    }
    if reg_weight != 0.0 {
        let mean = column_mean(&probs);
        let g: Vec<f64> = mean.iter().map(|m| -1.0 / (c as f64 * m.max(LOG_EPS))).collect();
        for r in 0..b {
            let p = probs.row(r);
            let gp: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for k in 0..c {
                let d = delta.get(r, k) + reg_weight * inv_b * p[k] * (g[k] - gp);
                delta.set(r, k, d);
            }
        }
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &trace.inputs[l];
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        let gl = &mut grads.layers[l];
        {
            let gw = gl.weight.as_mut_slice();
            for r in 0..b {
                let d = delta.row(r);
                let a = input.row(r);
                for o in 0..out {
                    let dz = d[o];
                    if dz == 0.0 {
                        continue;
                    }
                    gl.bias[o] += dz;
                    let row = &mut gw[o * inp..(o + 1) * inp];
                    row.iter_mut().zip(a).for_each(|(g, av)| *g += dz * av);
                }
            }
        }
        if l > 0 {
            let pre = trace.pre.remove(l - 1);
            let w = layer.weight.as_slice();
            let mut next = Matrix::zeros(b, inp);
            for r in 0..b {
                let d = delta.row(r);
                let z = pre.row(r);
                let nr = next.row_mut(r);
                for (j, nj) in nr.iter_mut().enumerate() {
                    let back: f64 = (0..out).map(|o| d[o] * w[o * inp + j]).sum();
                    *nj = back * params.activation.derivative(z[j]);
                }
            }
            delta = next;
        }
    }

    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss {loss} or its gradient over {b} examples"
        )));
    }
    Ok((loss, grads))
}

/// One momentum-SGD step on the batch objective. Returns the loss before the step.
pub fn train_batch(
    params: &mut MlpParams,
    x_batch: &Matrix,
    targets: &[SoftLabel],
    sgd: &SgdConfig,
    reg_weight: f64,
    opt: &mut OptState,
) -> Result<f64> {
    let (loss, grads) = loss_and_grad(params, x_batch, targets, reg_weight)?;
    let lr = sgd.learning_rate;
    for ((layer, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut opt.velocity.layers)
    {
        let wd = sgd.weight_decay;
        let mu = sgd.momentum;
        let update = |theta: &mut [f64], grad: &[f64], vel: &mut [f64]| {
            for ((t, g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + *g + wd * *t;
                *t -= lr * *v;
            }
        };
        update(
            layer.weight.as_mut_slice(),
            g.weight.as_slice(),
            v.weight.as_mut_slice(),
        );
        update(&mut layer.bias, &g.bias, &mut v.bias);
    }
    Ok(loss)
}

/// Max relative error between `analytic` and central differences of
/// [`batch_loss`], over every parameter.
pub fn compare_gradients(
    params: &MlpParams,
    x: &Matrix,
    targets: &[SoftLabel],
    reg_weight: f64,
    epsilon: f64,
    analytic: &Gradients,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Validation(format!(
            "epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }
    let analytic = analytic.flat();
    if analytic.len() != params.param_count() {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *probe.flat_slot(k);
        *probe.flat_slot(k) = orig + epsilon;
        let up = batch_loss(&probe, x, targets, reg_weight)?;
        *probe.flat_slot(k) = orig - epsilon;
        let down = batch_loss(&probe, x, targets, reg_weight)?;
        *probe.flat_slot(k) = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks [`loss_and_grad`] against central differences.
pub fn grad_check(
    params: &MlpParams,
    x_batch: &Matrix,
    targets: &[SoftLabel],
    reg_weight: f64,
    epsilon: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grad(params, x_batch, targets, reg_weight)?;
    compare_gradients(params, x_batch, targets, reg_weight, epsilon, &grads)
}
