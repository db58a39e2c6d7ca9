//! Parameter-to-latent maps: multiquadric RBF interpolation and ANN regression.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{train, Activation, DenseNetwork, LossReport, TrainConfig};

/// Condition estimate above which the interpolation system is regularized.
pub const CONDITION_LIMIT: f64 = 1e12;
const TIKHONOV_FACTOR: f64 = 1e-10;

/// `sqrt(1 + (eps r)^2)`.
pub fn multiquadric(r: f64, epsilon: f64) -> f64 {
    (1.0 + (epsilon * r).powi(2)).sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Multiquadric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfModel {
    /// One training parameter vector per row.
    pub centers: Vec<Vec<f64>>,
    /// `M x L`, one row per center.
    pub weights: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub kernel: Kernel,
    /// Diagonal shift subtracted from the kernel matrix, zero when unregularized.
    #[serde(default)]
    pub regularization: f64,
    #[serde(default)]
    pub condition_estimate: f64,
}

impl RbfModel {
    pub fn param_dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn is_regularized(&self) -> bool {
        self.regularization > 0.0
    }
}

/// Dot product carried in double-double (error-free transforms), rounded once.
fn compensated_dot(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut err = 0.0f64;
    for (x, y) in a.zip(b) {
        let prod = x * y;
        let prod_err = x.mul_add(y, -prod);
        let t = sum + prod;
        let z = t - sum;
        err += (sum - (t - z)) + (prod - z) + prod_err;
        sum = t;
    }
    sum + err
}

fn kernel_matrix(centers: &[Vec<f64>], epsilon: f64) -> DMatrix<f64> {
    let m = centers.len();
    DMatrix::from_fn(m, m, |i, j| multiquadric(distance(&centers[i], &centers[j]), epsilon))
}

/// Interpolates `latents` (one row per center) at `params`.
///
/// Falls back to a Tikhonov-regularized solve when the 2-norm condition
/// number of the kernel matrix exceeds [`CONDITION_LIMIT`]. The multiquadric
/// kernel matrix has a single positive eigenvalue, so the diagonal shift is
/// applied towards the negative spectrum.
pub fn rbf_fit(params: &[Vec<f64>], latents: &[Vec<f64>], epsilon: f64) -> Result<RbfModel> {
    let m = params.len();
    if m == 0 {
        return Err(Error::InvalidArgument("RBF fit needs at least one center".into()));
    }
    if latents.len() != m {
        return Err(Error::Dimension {
            context: "RBF latents",
            expected: m,
            actual: latents.len(),
        });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("shape parameter must be positive, got {epsilon}")));
    }
    let p = params[0].len();
    let l = latents[0].len();
    if params.iter().any(|c| c.len() != p) || latents.iter().any(|y| y.len() != l) || p == 0 || l == 0 {
        return Err(Error::InvalidArgument("ragged or empty RBF input rows".into()));
    }
    if params.iter().flatten().chain(latents.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite RBF input".into()));
    }
    for i in 0..m {
        for j in 0..i {
            if params[i] == params[j] {
                return Err(Error::InvalidArgument(format!("RBF centers {j} and {i} coincide")));
            }
        }
    }

    let phi = kernel_matrix(params, epsilon);
    let sv = phi.singular_values();
    let smin = sv.min();
    let condition = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    let rhs = DMatrix::from_fn(m, l, |i, k| latents[i][k]);

    let mut regularization = 0.0;
    let mut system = phi.clone();
    if condition > CONDITION_LIMIT {
        regularization = TIKHONOV_FACTOR * phi.trace() / m as f64;
        for i in 0..m {
            system[(i, i)] -= regularization;
        }
        log::warn!(
            "RBF kernel matrix condition estimate {condition:e} exceeds {CONDITION_LIMIT:e}; \
             regularizing with {regularization:e}"
        );
    }
    let lu = system.clone().lu();
    let mut w = lu
        .solve(&rhs)
        .ok_or_else(|| Error::LinearAlgebra(format!("singular RBF system (condition estimate {condition:e})")))?;
    // Refinement against the unregularized kernel with residuals in extended
    // precision. Without a shift this is mixed-precision iterative refinement;
    // with one it is iterated Tikhonov.
    let residual = |w: &DMatrix<f64>| {
        DMatrix::from_fn(m, l, |i, k| {
            let fit = compensated_dot(phi.row(i).iter().copied(), w.column(k).iter().copied());
            rhs[(i, k)] - fit
        })
    };
    let iterations = if regularization > 0.0 { 50 } else { 10 };
    let mut r = residual(&w);
    let mut best = r.norm();
    for _ in 0..iterations {
        if best == 0.0 {
            break;
        }
        let Some(dw) = lu.solve(&r) else { break };
        let next = &w + dw;
        let next_r = residual(&next);
        let n = next_r.norm();
        if !(n < best) {
            break;
        }
        best = n;
        w = next;
        r = next_r;
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearAlgebra(format!(
            "RBF weights not finite (condition estimate {condition:e})"
        )));
    }
    Ok(RbfModel {
        centers: params.to_vec(),
        weights: (0..m).map(|i| w.row(i).iter().copied().collect()).collect(),
        epsilon,
        kernel: Kernel::Multiquadric,
        regularization,
        condition_estimate: condition,
    })
}

/// `sum_i w_i phi(|mu - c_i|)`.
pub fn rbf_predict(model: &RbfModel, mu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != model.param_dim() {
        return Err(Error::Dimension {
            context: "RBF predict",
            expected: model.param_dim(),
            actual: mu.len(),
        });
    }
    let phi: Vec<f64> = model
        .centers
        .iter()
        .map(|c| multiquadric(distance(mu, c), model.epsilon))
        .collect();
    Ok((0..model.latent_dim())
        .map(|k| compensated_dot(model.weights.iter().map(|w| w[k]), phi.iter().copied()))
        .collect())
}

/// Worst training-point error relative to the largest training latent norm.
pub fn rbf_training_error(model: &RbfModel, latents: &[Vec<f64>]) -> Result<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (c, y) in model.centers.iter().zip(latents) {
        let pred = rbf_predict(model, c)?;
        num = num.max(distance(&pred, y));
        den = den.max(y.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(if den > 0.0 { num / den } else { num })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    /// Z-score each latent component before training.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl Default for AnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![4, 4],
            activation: Activation::Softplus,
            train: TrainConfig {
                target_loss: Some(1e-3),
                ..TrainConfig::epochs(5e-3, 200_000)
            },
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnRegressor {
    pub net: DenseNetwork,
    /// Per-component `(mean, std)` undone after the forward pass.
    #[serde(default)]
    pub output_scaling: Option<Vec<(f64, f64)>>,
}

impl AnnRegressor {
    pub fn param_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn unscale(&self, mut y: DMatrix<f64>) -> DMatrix<f64> {
        if let Some(s) = &self.output_scaling {
            for (k, (mean, sd)) in s.iter().enumerate() {
                for v in y.row_mut(k).iter_mut() {
                    *v = *v * sd + mean;
                }
            }
        }
        y
    }

    /// Predictions for every column of `mu` (`p x n`), returned as `L x n`.
    pub fn predict_batch(&self, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.unscale(self.net.forward_batch(mu)?))
    }
}

pub fn ann_fit(params: &[Vec<f64>], latents: &[Vec<f64>], cfg: &AnnConfig) -> Result<(AnnRegressor, LossReport)> {
    let m = params.len();
    if m == 0 || latents.len() != m {
        return Err(Error::Dimension {
            context: "ANN training pairs",
            expected: m,
            actual: latents.len(),
        });
    }
    let p = params[0].len();
    let l = latents[0].len();
    if params.iter().any(|c| c.len() != p) || latents.iter().any(|y| y.len() != l) {
        return Err(Error::InvalidArgument("ragged ANN training rows".into()));
    }
    let x = DMatrix::from_fn(p, m, |i, j| params[j][i]);
    let mut y = DMatrix::from_fn(l, m, |k, j| latents[j][k]);
    let output_scaling = if cfg.standardize {
        let mut s = Vec::with_capacity(l);
        for k in 0..l {
            let row = y.row(k);
            let mean = row.mean();
            let sd = row.variance().sqrt();
            let sd = if sd > 1e-300 { sd } else { 1.0 };
            s.push((mean, sd));
            for v in y.row_mut(k).iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
        Some(s)
    } else {
        None
    };
    let init = DenseNetwork::mlp(p, &cfg.hidden, l, cfg.activation, Activation::Identity, cfg.train.rng_seed)?;
    let (net, report) = train(&init, &x, &y, &cfg.train, None)?;
    Ok((AnnRegressor { net, output_scaling }, report))
}

pub fn ann_predict(model: &AnnRegressor, mu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != model.param_dim() {
        return Err(Error::Dimension {
            context: "ANN predict",
            expected: model.param_dim(),
            actual: mu.len(),
        });
    }
    let out = model.predict_batch(&DMatrix::from_column_slice(mu.len(), 1, mu))?;
    Ok(out.as_slice().to_vec())
}

/// A fitted parameter-to-latent map.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Rbf(RbfModel),
    Ann(AnnRegressor),
}

impl Regressor {
    pub fn predict(&self, mu: &[f64]) -> Result<Vec<f64>> {
        match self {
            Regressor::Rbf(m) => rbf_predict(m, mu),
            Regressor::Ann(m) => ann_predict(m, mu),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Regressor::Rbf(m) => m.latent_dim(),
            Regressor::Ann(m) => m.latent_dim(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Regressor::Rbf(m) => m.param_dim(),
            Regressor::Ann(m) => m.param_dim(),
        }
    }
}

/// Column-vector helper for callers holding `nalgebra` data.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
}
