//! Dense feed-forward networks with full-batch Adam training.
//!
//! Samples are stored column-wise: a batch of `n` inputs is an
//! `input_dim x n` matrix. Each layer computes `sigma(W h + b)` with `W`
//! of shape `out x in`.
//!
//! The training loss is
//!
//! ```text
//! MSE(N(x), y) + (alpha / 2) * sum ||W_l||_F^2 + lambda * penalty(N)
//! ```
//!
//! where the MSE is averaged over samples and output components, the weight
//! decay term covers weight matrices only (not biases), and `penalty` is an
//! optional differentiable term such as [`ContinuityPenalty`].

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEAKY_SLOPE: f64 = 0.01;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Softplus,
    LeakyRelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::Dimension {
                context: "layer bias",
                expected: weights.nrows(),
                actual: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Builds a layer from row-major weights.
    pub fn from_rows(
        out_dim: usize,
        in_dim: usize,
        weights: &[f64],
        bias: &[f64],
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != out_dim * in_dim {
            return Err(Error::Dimension {
                context: "layer weights",
                expected: out_dim * in_dim,
                actual: weights.len(),
            });
        }
        Self::new(
            DMatrix::from_row_slice(out_dim, in_dim, weights),
            DVector::from_column_slice(bias),
            activation,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn pre_activation(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * input;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkJson", into = "NetworkJson")]
pub struct DenseNetwork {
    layers: Vec<Layer>,
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].input_dim() != w[0].output_dim() {
                return Err(Error::Dimension {
                    context: "layer chaining",
                    expected: w[0].output_dim(),
                    actual: w[1].input_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases.
    ///
    /// `sizes` lists every layer width including input and output;
    /// `activations` has one entry per weight layer.
    pub fn glorot(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                Layer::new(weights, DVector::zeros(fan_out), act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// Convenience constructor: `input -> hidden... -> output`, with `hidden_act`
    /// on every hidden layer and `output_act` on the last one.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(output_act);
        Self::glorot(&sizes, &acts, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::output_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Concatenates two networks into one (`self` first).
    pub fn stacked(&self, next: &DenseNetwork) -> Result<DenseNetwork> {
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Self::from_layers(layers)
    }

    /// Splits into the first `n` layers and the rest.
    pub fn split_at(&self, n: usize) -> Result<(DenseNetwork, DenseNetwork)> {
        if n == 0 || n >= self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split a {}-layer network at {n}",
                self.layers.len()
            )));
        }
        Ok((
            Self::from_layers(self.layers[..n].to_vec())?,
            Self::from_layers(self.layers[n..].to_vec())?,
        ))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.as_slice().to_vec())
    }

    /// Evaluates every column of `inputs`.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs.nrows())?;
        let mut h = inputs.clone();
        for layer in &self.layers {
            let act = layer.activation;
            h = layer.pre_activation(&h);
            if act != Activation::Identity {
                h.apply(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                actual: rows,
            });
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(inputs.nrows())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(inputs.clone());
        for layer in &self.layers {
            let z = layer.pre_activation(activations.last().unwrap());
            let act = layer.activation;
            let a = if act == Activation::Identity {
                z.clone()
            } else {
                z.map(|v| act.apply(v))
            };
            pre.push(z);
            activations.push(a);
        }
        Ok(ForwardCache { activations, pre })
    }

    /// Accumulates `d(sum upstream . output)/d(params)` into `grads`.
    fn backward(&self, cache: &ForwardCache, upstream: DMatrix<f64>, grads: &mut Gradients) {
        let mut delta = upstream;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                delta.zip_apply(&cache.pre[l], |d, z| *d *= act.derivative(z));
            }
            let input = &cache.activations[l];
            grads.layers[l].0.gemm(1.0, &delta, &input.transpose(), 1.0);
            for col in delta.column_iter() {
                grads.layers[l].1 += col;
            }
            if l > 0 {
                delta = layer.weights.tr_mul(&delta);
            }
        }
    }

    /// All parameters flattened: per layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    p.push(l.weights[(i, j)]);
                }
            }
            p.extend(l.bias.iter());
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.num_params(),
                actual: p.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    l.weights[(i, j)] = p[k];
                    k += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = p[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_squared()).sum()
    }
}

struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

/// Per-layer `(dW, db)` accumulators shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl Gradients {
    pub fn zeros(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                        DVector::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    /// Same ordering as [`DenseNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (w, b) in &self.layers {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    p.push(w[(i, j)]);
                }
            }
            p.extend(b.iter());
        }
        p
    }
}

/// A differentiable extra loss term.
pub trait Penalty: Sync {
    /// Returns the penalty value and adds `scale * d(penalty)/d(params)` to `grads`.
    fn value_and_grad(&self, net: &DenseNetwork, scale: f64, grads: &mut Gradients) -> Result<f64>;

    fn value(&self, net: &DenseNetwork) -> Result<f64> {
        let mut scratch = Gradients::zeros(net);
        self.value_and_grad(net, 0.0, &mut scratch)
    }
}

/// `|| N(r_i, 0) - N(r_i, 2pi) ||` over the given radii, for networks taking `(r, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityPenalty {
    pub radii: Vec<f64>,
}

impl ContinuityPenalty {
    /// `n` equispaced radii on `[0, radius]`.
    pub fn equispaced(radius: f64, n: usize) -> Self {
        let radii = match n {
            0 => vec![],
            1 => vec![0.0],
            _ => (0..n).map(|i| radius * i as f64 / (n - 1) as f64).collect(),
        };
        Self { radii }
    }

    fn seam_inputs(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.radii.len();
        let at = |theta: f64| {
            DMatrix::from_fn(2, n, |i, k| if i == 0 { self.radii[k] } else { theta })
        };
        (at(0.0), at(TAU))
    }
}

impl Penalty for ContinuityPenalty {
    fn value_and_grad(&self, net: &DenseNetwork, scale: f64, grads: &mut Gradients) -> Result<f64> {
        net.check_input(2)?;
        if self.radii.is_empty() {
            return Ok(0.0);
        }
        let (x0, x1) = self.seam_inputs();
        let c0 = net.forward_cached(&x0)?;
        let c1 = net.forward_cached(&x1)?;
        let diff = c0.activations.last().unwrap() - c1.activations.last().unwrap();
        let value = diff.norm();
        if value > 0.0 && scale != 0.0 {
            let up = &diff * (scale / value);
            net.backward(&c1, -&up, grads);
            net.backward(&c0, up, grads);
        }
        Ok(value)
    }
}

pub fn continuity_penalty(net: &DenseNetwork, radii: &[f64]) -> Result<f64> {
    ContinuityPenalty {
        radii: radii.to_vec(),
    }
    .value(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub continuity_weight: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn epochs(learning_rate: f64, max_epochs: usize) -> Self {
        Self {
            learning_rate,
            max_epochs: Some(max_epochs),
            target_loss: None,
            weight_decay: 0.0,
            continuity_weight: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs.is_none() && self.target_loss.is_none() {
            return Err(Error::Config("set max_epochs, target_loss, or both".into()));
        }
        if self.weight_decay < 0.0 || self.continuity_weight < 0.0 {
            return Err(Error::Config("weight_decay and continuity_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Total loss at the start of each epoch.
    pub history: Vec<f64>,
    pub final_loss: f64,
    pub final_mse: f64,
    pub final_weight_decay: f64,
    pub final_penalty: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy)]
struct LossParts {
    mse: f64,
    decay: f64,
    penalty: f64,
    total: f64,
}

fn check_data(net: &DenseNetwork, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
    net.check_input(inputs.nrows())?;
    if targets.nrows() != net.output_dim() {
        return Err(Error::Dimension {
            context: "training targets",
            expected: net.output_dim(),
            actual: targets.nrows(),
        });
    }
    if inputs.ncols() != targets.ncols() {
        return Err(Error::Dimension {
            context: "training sample count",
            expected: inputs.ncols(),
            actual: targets.ncols(),
        });
    }
    if inputs.ncols() == 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    Ok(())
}

fn loss_parts(
    net: &DenseNetwork,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    extra: Option<&dyn Penalty>,
    grads: Option<&mut Gradients>,
) -> Result<LossParts> {
    let cache = net.forward_cached(inputs)?;
    let resid = cache.activations.last().unwrap() - targets;
    let count = resid.len() as f64;
    let mse = resid.norm_squared() / count;
    let decay = 0.5 * cfg.weight_decay * net.weight_norm_sq();
    let penalty;
    match grads {
        Some(g) => {
            net.backward(&cache, resid * (2.0 / count), g);
            if cfg.weight_decay != 0.0 {
                for (gl, l) in g.layers.iter_mut().zip(&net.layers) {
                    gl.0 += &l.weights * cfg.weight_decay;
                }
            }
            penalty = match extra {
                Some(p) => p.value_and_grad(net, cfg.continuity_weight, g)?,
                None => 0.0,
            };
        }
        None => {
            penalty = match extra {
                Some(p) => p.value(net)?,
                None => 0.0,
            };
        }
    }
    Ok(LossParts {
        mse,
        decay,
        penalty,
        total: mse + decay + cfg.continuity_weight * penalty,
    })
}

/// Total loss and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    net: &DenseNetwork,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    extra: Option<&dyn Penalty>,
) -> Result<(f64, Gradients)> {
    check_data(net, inputs, targets)?;
    let mut g = Gradients::zeros(net);
    let parts = loss_parts(net, inputs, targets, cfg, extra, Some(&mut g))?;
    Ok((parts.total, g))
}

pub fn total_loss(
    net: &DenseNetwork,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    extra: Option<&dyn Penalty>,
) -> Result<f64> {
    check_data(net, inputs, targets)?;
    Ok(loss_parts(net, inputs, targets, cfg, extra, None)?.total)
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(net: &DenseNetwork) -> Self {
        Self {
            m: Gradients::zeros(net),
            v: Gradients::zeros(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut DenseNetwork, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &g.layers[l];
            let (mw, mb) = &mut self.m.layers[l];
            let (vw, vb) = &mut self.v.layers[l];
            for k in 0..gw.len() {
                update(&mut layer.weights[k], &mut mw[k], &mut vw[k], gw[k]);
            }
            for k in 0..gb.len() {
                update(&mut layer.bias[k], &mut mb[k], &mut vb[k], gb[k]);
            }
        }
    }
}

/// Full-batch Adam on `MSE + (alpha/2)||W||^2 + lambda * extra`.
///
/// `inputs` is `input_dim x n`, `targets` is `output_dim x n`. Stops after
/// `max_epochs` updates or as soon as the total loss reaches `target_loss`.
pub fn train(
    net: &DenseNetwork,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    extra: Option<&dyn Penalty>,
) -> Result<(DenseNetwork, LossReport)> {
    cfg.validate()?;
    check_data(net, inputs, targets)?;
    let mut net = net.clone();
    let mut adam = Adam::new(&net);
    let max_epochs = cfg.max_epochs.unwrap_or(usize::MAX);
    let mut history = Vec::new();
    let mut epoch = 0;
    while epoch < max_epochs {
        let mut g = Gradients::zeros(&net);
        let parts = loss_parts(&net, inputs, targets, cfg, extra, Some(&mut g))?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: parts.total,
            });
        }
        history.push(parts.total);
        if cfg.target_loss.is_some_and(|t| parts.total <= t) {
            break;
        }
        adam.step(&mut net, &g, cfg.learning_rate);
        epoch += 1;
    }
    let last = loss_parts(&net, inputs, targets, cfg, extra, None)?;
    if !last.total.is_finite() {
        return Err(Error::Divergence {
            epoch,
            loss: last.total,
        });
    }
    log::debug!("trained {epoch} epochs, final loss {:.3e}", last.total);
    Ok((
        net,
        LossReport {
            history,
            final_loss: last.total,
            final_mse: last.mse,
            final_weight_decay: last.decay,
            final_penalty: last.penalty,
            epochs: epoch,
        },
    ))
}

/// On-disk form of a [`DenseNetwork`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkJson {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// One row-major `out x in` matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<DenseNetwork> for NetworkJson {
    fn from(net: DenseNetwork) -> Self {
        let weights = net
            .layers
            .iter()
            .map(|l| {
                let mut w = Vec::with_capacity(l.weights.len());
                for i in 0..l.weights.nrows() {
                    w.extend(l.weights.row(i).iter());
                }
                w
            })
            .collect();
        NetworkJson {
            layer_sizes: net.layer_sizes(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
            weights,
            biases: net.layers.iter().map(|l| l.bias.as_slice().to_vec()).collect(),
        }
    }
}

impl TryFrom<NetworkJson> for DenseNetwork {
    type Error = Error;

    fn try_from(j: NetworkJson) -> Result<Self> {
        let n = j.layer_sizes.len().saturating_sub(1);
        if n == 0 || j.activations.len() != n || j.weights.len() != n || j.biases.len() != n {
            return Err(Error::InvalidArgument(format!(
                "network json: {} sizes, {} activations, {} weight blocks, {} bias blocks",
                j.layer_sizes.len(),
                j.activations.len(),
                j.weights.len(),
                j.biases.len()
            )));
        }
        let layers = (0..n)
            .map(|l| {
                Layer::from_rows(
                    j.layer_sizes[l + 1],
                    j.layer_sizes[l],
                    &j.weights[l],
                    &j.biases[l],
                    j.activations[l],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(w: &[f64], b: f64, act: Activation) -> DenseNetwork {
        DenseNetwork::from_layers(vec![Layer::from_rows(1, w.len(), w, &[b], act).unwrap()]).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(single(&[1.0], 0.0, Activation::Identity).forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(
            single(&[0.0, 0.0], 5.0, Activation::Identity).forward(&[3.0, -7.0]).unwrap(),
            vec![5.0]
        );
        // ln(1 + e^3) = 3.048587351573742
        let y = single(&[1.0, 1.0], 1.0, Activation::Softplus).forward(&[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(y[0], 3.048587351573742, epsilon = 1e-14);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = single(&[1.0, 1.0], 0.0, Activation::Identity);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn chaining_is_validated() {
        let a = Layer::from_rows(2, 3, &[0.0; 6], &[0.0; 2], Activation::Identity).unwrap();
        let b = Layer::from_rows(1, 3, &[0.0; 3], &[0.0], Activation::Identity).unwrap();
        assert!(DenseNetwork::from_layers(vec![a, b]).is_err());
        assert!(Layer::from_rows(1, 1, &[f64::NAN], &[0.0], Activation::Identity).is_err());
    }

    #[test]
    fn identity_network_is_affine() {
        let net = DenseNetwork::mlp(3, &[4, 2], 2, Activation::Identity, Activation::Identity, 7)
            .unwrap();
        let mut net = net;
        for l in net.layers_mut() {
            l.bias = DVector::from_fn(l.bias.len(), |i, _| 0.1 * (i as f64 + 1.0));
        }
        let l = net.layers();
        let w = &l[2].weights * &l[1].weights * &l[0].weights;
        let b = &l[2].weights * (&l[1].weights * &l[0].bias + &l[1].bias) + &l[2].bias;
        let x = [0.3, -1.2, 2.0];
        let direct = &w * DVector::from_column_slice(&x) + b;
        let y = net.forward(&x).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(y[i], direct[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn activation_properties() {
        for z in [-50.0, -3.0, -1e-3, 0.0, 1e-3, 2.0, 700.0] {
            assert!(Activation::Softplus.apply(z) > 0.0);
            let lr = Activation::LeakyRelu.apply(z);
            assert!(lr == z || lr == LEAKY_SLOPE * z);
            assert_eq!(lr.signum(), if z == 0.0 { lr.signum() } else { z.signum() });
        }
        assert!(Activation::Softplus.apply(1000.0).is_finite());
    }

    #[test]
    fn fits_a_line() {
        let xs: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let inputs = DMatrix::from_row_slice(1, xs.len(), &xs);
        let targets = inputs.map(|x| 3.0 * x + 1.0);
        let net = single(&[0.0], 0.0, Activation::Identity);
        let cfg = TrainConfig::epochs(0.05, 3000);
        let (fit, report) = train(&net, &inputs, &targets, &cfg, None).unwrap();
        assert_abs_diff_eq!(fit.layers()[0].weights[(0, 0)], 3.0, epsilon = 1e-3);
        assert_abs_diff_eq!(fit.layers()[0].bias[0], 1.0, epsilon = 1e-3);
        assert!(report.history.iter().all(|v| v.is_finite() && *v >= 0.0));

        let ridge = TrainConfig {
            weight_decay: 1e3,
            ..cfg
        };
        let (shrunk, _) = train(&net, &inputs, &targets, &ridge, None).unwrap();
        assert!(shrunk.layers()[0].weights[(0, 0)].abs() < fit.layers()[0].weights[(0, 0)].abs());
    }

    #[test]
    fn target_loss_stops_early() {
        let inputs = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
        let targets = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let net = single(&[0.0], 0.0, Activation::Identity);
        let cfg = TrainConfig {
            target_loss: Some(1e-2),
            ..TrainConfig::epochs(0.05, 100_000)
        };
        let (_, report) = train(&net, &inputs, &targets, &cfg, None).unwrap();
        assert!(report.epochs < 100_000);
        assert!(*report.history.last().unwrap() <= 1e-2);
    }

    #[test]
    fn divergence_is_reported() {
        let inputs = DMatrix::from_row_slice(1, 2, &[1e200, -1e200]);
        let targets = DMatrix::from_row_slice(1, 2, &[1e200, 1e200]);
        let net = single(&[1.0], 0.0, Activation::Identity);
        let err = train(&net, &inputs, &targets, &TrainConfig::epochs(1.0, 10), None).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, .. }));
    }

    #[test]
    fn continuity_examples() {
        let ignore_theta = single(&[2.0, 0.0], 1.0, Activation::Softplus);
        assert_eq!(continuity_penalty(&ignore_theta, &[0.1, 0.5, 1.0]).unwrap(), 0.0);
        let any = DenseNetwork::mlp(2, &[3], 1, Activation::Softplus, Activation::Identity, 1)
            .unwrap();
        assert_eq!(continuity_penalty(&any, &[]).unwrap(), 0.0);
        let theta = single(&[0.0, 1.0], 0.0, Activation::Identity);
        assert_abs_diff_eq!(continuity_penalty(&theta, &[1.0]).unwrap(), TAU, epsilon = 1e-15);
        let wrong = single(&[1.0], 0.0, Activation::Identity);
        assert!(continuity_penalty(&wrong, &[1.0]).is_err());
        let eq = ContinuityPenalty::equispaced(1.0, 100);
        assert_eq!(eq.radii.len(), 100);
        assert_eq!(eq.radii[99], 1.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = DenseNetwork::mlp(2, &[5, 3], 1, Activation::LeakyRelu, Activation::Identity, 3)
            .unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: DenseNetwork = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["layer_sizes"], serde_json::json!([2, 5, 3, 1]));
        assert_eq!(v["activations"][0], "leaky_relu");
    }

    #[test]
    fn parameter_round_trip() {
        let mut net =
            DenseNetwork::mlp(2, &[3], 2, Activation::Softplus, Activation::Identity, 9).unwrap();
        let p: Vec<f64> = (0..net.num_params()).map(|i| i as f64).collect();
        net.set_parameters(&p).unwrap();
        assert_eq!(net.parameters(), p);
        assert_eq!(net.layers()[0].weights[(0, 1)], 1.0);
    }

    #[test]
    fn training_is_reproducible() {
        let inputs = DMatrix::from_fn(2, 10, |i, j| (i as f64 + 1.0) * j as f64 * 0.1);
        let targets = DMatrix::from_fn(1, 10, |_, j| inputs[(0, j)].sin());
        let net = DenseNetwork::mlp(2, &[4], 1, Activation::Softplus, Activation::Identity, 5)
            .unwrap();
        let cfg = TrainConfig::epochs(1e-2, 200);
        let a = train(&net, &inputs, &targets, &cfg, None).unwrap();
        let b = train(&net, &inputs, &targets, &cfg, None).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
