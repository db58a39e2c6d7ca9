//! Snapshot compression: POD (two routes) and autoencoders.
//!
//! Snapshot matrices are `P x M` with one snapshot per column. Nothing is
//! centered; POD modes span the raw snapshot space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{csv_err, read_numeric_csv};
use crate::neuralnet::{train, Activation, DenseNetwork, Layer, LossReport, TrainConfig};

const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Leading POD modes (columns of `modes`) and their singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    modes: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn new(modes: DMatrix<f64>, singular_values: Vec<f64>) -> Result<Self> {
        if modes.ncols() != singular_values.len() {
            return Err(Error::Dimension {
                context: "POD singular values",
                expected: modes.ncols(),
                actual: singular_values.len(),
            });
        }
        if singular_values.windows(2).any(|w| w[0] < w[1]) || singular_values.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("singular values must be nonnegative and descending".into()));
        }
        let basis = Self {
            modes,
            singular_values,
        };
        let err = basis.orthonormality_error();
        if !(err <= ORTHONORMALITY_TOL) {
            return Err(Error::LinearAlgebra(format!(
                "POD modes not orthonormal: max |U^T U - I| = {err:e}"
            )));
        }
        Ok(basis)
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn latent_dim(&self) -> usize {
        self.modes.ncols()
    }

    pub fn dof(&self) -> usize {
        self.modes.nrows()
    }

    /// `max |U^T U - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.modes.tr_mul(&self.modes);
        let l = g.nrows();
        (g - DMatrix::identity(l, l)).amax()
    }

    /// `U^T v`.
    pub fn compress(&self, field: &[f64]) -> Result<Vec<f64>> {
        check_len("POD compress", self.dof(), field.len())?;
        Ok(self.modes.tr_mul(&DVector::from_column_slice(field)).as_slice().to_vec())
    }

    /// `U a`.
    pub fn expand(&self, coords: &[f64]) -> Result<Vec<f64>> {
        check_len("POD expand", self.latent_dim(), coords.len())?;
        Ok((&self.modes * DVector::from_column_slice(coords)).as_slice().to_vec())
    }

    /// Writes `modes.csv` (`P x L`, header `mode_1..`) and `singular_values.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("modes.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record((1..=self.latent_dim()).map(|k| format!("mode_{k}")))
            .map_err(|e| csv_err(&path, e))?;
        for i in 0..self.dof() {
            let row = self.modes.row(i);
            w.write_record(row.iter().map(f64::to_string)).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("singular_values.json");
        let text = serde_json::to_string_pretty(&self.singular_values).expect("vec serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("modes.csv");
        let rows = read_numeric_csv(&path, &["mode_1"])?;
        let modes = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        let spath = dir.join("singular_values.json");
        let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let sv: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::malformed(&spath, e))?;
        PodBasis::new(modes, sv)
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_rank_request(y: &DMatrix<f64>, latent_dim: usize) -> Result<()> {
    let max = y.nrows().min(y.ncols());
    if latent_dim == 0 || latent_dim > max {
        return Err(Error::InvalidArgument(format!(
            "latent dimension {latent_dim} must lie in 1..={max} for a {}x{} snapshot matrix",
            y.nrows(),
            y.ncols()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearAlgebra("snapshot matrix contains non-finite entries".into()));
    }
    Ok(())
}

/// Thin SVD of the snapshot matrix truncated to the `latent_dim` leading modes.
pub fn pod_fit(y: &DMatrix<f64>, latent_dim: usize) -> Result<PodBasis> {
    check_rank_request(y, latent_dim)?;
    let (u, sigma) = thin_svd(y)?;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let keep = &order[..latent_dim];
    let modes = u.select_columns(keep);
    let sv = keep.iter().map(|&k| sigma[k]).collect();
    PodBasis::new(modes, sv)
}

/// Left singular vectors and singular values of `a`, unordered.
///
/// The matrix is first reduced to a square triangular factor by Householder
/// QR (of `a` when tall, of `a^T` when wide). One-sided Jacobi rotations then
/// orthogonalize the factor's columns, whose norms are the singular values.
/// The bidiagonal SVD with left vectors requested is avoided on purpose: on
/// rank-deficient snapshot matrices it returned singular values off by tens
/// of percent.
fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (basis, mut b) = if a.nrows() >= a.ncols() {
        let qr = a.clone().qr();
        (Some(qr.q()), qr.r())
    } else {
        (None, a.transpose().qr().r().transpose())
    };
    let k = b.ncols();
    let floor = f64::EPSILON * b.norm();
    jacobi_orthogonalize_columns_above(&mut b, floor)?;

    let sigma = DVector::from_fn(k, |j, _| b.column(j).norm());
    let smax = sigma.max();
    let null_tol = smax * (k as f64) * f64::EPSILON;
    let mut u = DMatrix::zeros(k, k);
    let mut null = Vec::new();
    for j in 0..k {
        if sigma[j] > null_tol {
            u.set_column(j, &(b.column(j) / sigma[j]));
        } else {
            null.push(j);
        }
    }
    // numerically null columns carry no direction; complete the basis instead
    let mut candidate = 0;
    for j in null {
        loop {
            let mut v = DVector::zeros(k);
            v[candidate] = 1.0;
            candidate += 1;
            for _pass in 0..2 {
                for i in 0..k {
                    let ui = u.column(i);
                    let d = ui.dot(&v);
                    v -= ui * d;
                }
            }
            let n = v.norm();
            if n > 0.5 {
                u.set_column(j, &(v / n));
                break;
            }
        }
    }
    let u = match basis {
        Some(q) => q * u,
        None => u,
    };
    Ok((u, sigma))
}

/// Method of snapshots: eigen-decomposition of the `M x M` correlation
/// matrix `C = Y^T Y`, modes `phi_i = Y v_i / sqrt(lambda_i)`.
///
/// Forming `C` squares the condition number, so the candidate modes are
/// polished with one-sided Jacobi rotations on `Y V` until mutually
/// orthogonal before truncation.
pub fn pod_fit_correlation(y: &DMatrix<f64>, latent_dim: usize) -> Result<PodBasis> {
    check_rank_request(y, latent_dim)?;
    let m = y.ncols();
    let c = y.tr_mul(y);
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = eig.eigenvectors.select_columns(&order);
    let mut b = y * v;
    jacobi_orthogonalize_columns(&mut b)?;

    let mut cols: Vec<(f64, usize)> = (0..m).map(|j| (b.column(j).norm(), j)).collect();
    cols.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma_max = cols[0].0;
    let mut modes = DMatrix::zeros(y.nrows(), latent_dim);
    let mut sv = Vec::with_capacity(latent_dim);
    for (k, &(sigma, j)) in cols.iter().take(latent_dim).enumerate() {
        if !(sigma > sigma_max * 1e-14) || sigma == 0.0 {
            return Err(Error::LinearAlgebra(format!(
                "correlation route: mode {} has a numerically zero eigenvalue; lower the latent dimension",
                k + 1
            )));
        }
        modes.set_column(k, &(b.column(j) / sigma));
        sv.push(sigma);
    }
    PodBasis::new(modes, sv)
}

/// One-sided Jacobi: rotates column pairs of `b` until they are mutually orthogonal.
fn jacobi_orthogonalize_columns(b: &mut DMatrix<f64>) -> Result<()> {
    jacobi_orthogonalize_columns_above(b, 0.0)
}

/// Jacobi orthogonalization that leaves alone pairs involving a column of
/// norm at most `floor`, so rounding-level null columns cannot stall it.
fn jacobi_orthogonalize_columns_above(b: &mut DMatrix<f64>, floor: f64) -> Result<()> {
    let n = b.ncols();
    let floor2 = floor * floor;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = b.column(p).norm_squared();
                let beta = b.column(q).norm_squared();
                let gamma = b.column(p).dot(&b.column(q));
                if alpha <= floor2 || beta <= floor2 {
                    continue;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..b.nrows() {
                    let (x, z) = (b[(i, p)], b[(i, q)]);
                    b[(i, p)] = cs * x - sn * z;
                    b[(i, q)] = sn * x + cs * z;
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::LinearAlgebra("Jacobi orthogonalization did not converge".into()))
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
///
/// Columns need not be orthonormal; both are orthonormalized first.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_len("principal angle rows", a.nrows(), b.nrows())?;
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let (small, large) = if qa.ncols() <= qb.ncols() { (qa, qb) } else { (qb, qa) };
    // sin of the largest angle is the spectral norm of the part of `small` outside span(large)
    let resid = &small - &large * large.tr_mul(&small);
    let s = resid.singular_values().max().min(1.0);
    Ok(s.asin())
}

fn orthonormal_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (u, sigma) = thin_svd(a)?;
    let smax = sigma.max();
    if !(smax > 0.0) {
        return Err(Error::LinearAlgebra("cannot take the span of a zero matrix".into()));
    }
    let keep: Vec<usize> = (0..sigma.len()).filter(|&k| sigma[k] > smax * 1e-12).collect();
    Ok(u.select_columns(&keep))
}

/// Hidden layer layout of an autoencoder. The decoder mirrors the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeArchitecture {
    /// Encoder hidden widths between the input and the latent layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl AeArchitecture {
    /// Single latent layer, no activation.
    pub fn linear() -> Self {
        Self {
            hidden: vec![],
            activation: Activation::Identity,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.activation == Activation::Identity
    }
}

/// Global affine scaling applied before encoding and undone after decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
    pub linear: bool,
    #[serde(default)]
    pub scaling: Option<Scaling>,
}

impl Autoencoder {
    pub fn from_parts(encoder: DenseNetwork, decoder: DenseNetwork) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
            return Err(Error::Dimension {
                context: "autoencoder latent",
                expected: encoder.output_dim(),
                actual: decoder.input_dim(),
            });
        }
        let linear = encoder
            .layers()
            .iter()
            .chain(decoder.layers())
            .all(|l| l.activation == Activation::Identity);
        Ok(Self {
            encoder,
            decoder,
            linear,
            scaling: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn dof(&self) -> usize {
        self.encoder.input_dim()
    }

    fn scale_in(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match self.scaling {
            None => y.clone(),
            Some(s) => y.map(|v| (v - s.shift) / s.scale),
        }
    }

    fn scale_out(&self, y: DMatrix<f64>) -> DMatrix<f64> {
        match self.scaling {
            None => y,
            Some(s) => y.map(|v| v * s.scale + s.shift),
        }
    }

    /// Encodes every column of `y`.
    pub fn compress_matrix(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.encoder.forward_batch(&self.scale_in(y))
    }

    pub fn expand_matrix(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.scale_out(self.decoder.forward_batch(z)?))
    }

    pub fn compress(&self, field: &[f64]) -> Result<Vec<f64>> {
        check_len("autoencoder compress", self.dof(), field.len())?;
        let z = self.compress_matrix(&DMatrix::from_column_slice(field.len(), 1, field))?;
        Ok(z.as_slice().to_vec())
    }

    pub fn expand(&self, coords: &[f64]) -> Result<Vec<f64>> {
        check_len("autoencoder expand", self.latent_dim(), coords.len())?;
        let y = self.expand_matrix(&DMatrix::from_column_slice(coords.len(), 1, coords))?;
        Ok(y.as_slice().to_vec())
    }
}

/// Trains encoder and decoder jointly on reconstruction MSE plus weight decay.
///
/// Hidden layers use `arch.activation`; the latent and output layers are linear.
/// With `standardize`, snapshots are shifted and scaled by their global mean
/// and standard deviation before training.
pub fn ae_fit(
    y: &DMatrix<f64>,
    latent_dim: usize,
    arch: &AeArchitecture,
    cfg: &TrainConfig,
    standardize: bool,
) -> Result<(Autoencoder, LossReport)> {
    check_rank_request(y, latent_dim)?;
    let p = y.nrows();
    let mut sizes = vec![p];
    sizes.extend(&arch.hidden);
    sizes.push(latent_dim);
    sizes.extend(arch.hidden.iter().rev());
    sizes.push(p);
    let n_enc = arch.hidden.len() + 1;
    let mut acts = Vec::new();
    for _ in 0..2 {
        acts.extend(std::iter::repeat_n(arch.activation, arch.hidden.len()));
        acts.push(Activation::Identity);
    }
    let init = DenseNetwork::glorot(&sizes, &acts, cfg.rng_seed)?;

    let scaling = if standardize {
        let mean = y.mean();
        let sd = y.variance().sqrt();
        Some(Scaling {
            shift: mean,
            scale: if sd > 0.0 { sd } else { 1.0 },
        })
    } else {
        None
    };
    let data = match scaling {
        None => y.clone(),
        Some(s) => y.map(|v| (v - s.shift) / s.scale),
    };
    let (net, report) = train(&init, &data, &data, cfg, None)?;
    let (encoder, decoder) = net.split_at(n_enc)?;
    let mut ae = Autoencoder::from_parts(encoder, decoder)?;
    ae.linear = arch.is_linear();
    ae.scaling = scaling;
    Ok((ae, report))
}

/// Decoder images of the canonical latent basis vectors, one column each.
pub fn ae_modes(ae: &Autoencoder) -> Result<DMatrix<f64>> {
    if ae.decoder.layers().iter().any(|l| l.activation != Activation::Identity) {
        return Err(Error::InvalidArgument("modes are only defined for a linear decoder".into()));
    }
    let l = ae.latent_dim();
    ae.expand_matrix(&DMatrix::identity(l, l))
}

/// A fitted compression map.
#[derive(Debug, Clone, PartialEq)]
pub enum Reducer {
    Pod(PodBasis),
    Autoencoder(Autoencoder),
}

impl Reducer {
    pub fn latent_dim(&self) -> usize {
        match self {
            Reducer::Pod(b) => b.latent_dim(),
            Reducer::Autoencoder(a) => a.latent_dim(),
        }
    }

    pub fn compress(&self, field: &[f64]) -> Result<Vec<f64>> {
        match self {
            Reducer::Pod(b) => b.compress(field),
            Reducer::Autoencoder(a) => a.compress(field),
        }
    }

    pub fn expand(&self, coords: &[f64]) -> Result<Vec<f64>> {
        match self {
            Reducer::Pod(b) => b.expand(coords),
            Reducer::Autoencoder(a) => a.expand(coords),
        }
    }

    /// Latent coordinates of every column, `L x M`.
    pub fn compress_matrix(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Reducer::Pod(b) => {
                check_len("POD compress", b.dof(), y.nrows())?;
                Ok(b.modes.tr_mul(y))
            }
            Reducer::Autoencoder(a) => a.compress_matrix(y),
        }
    }

    pub fn expand_matrix(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Reducer::Pod(b) => {
                check_len("POD expand", b.latent_dim(), z.nrows())?;
                Ok(&b.modes * z)
            }
            Reducer::Autoencoder(a) => a.expand_matrix(z),
        }
    }
}

/// Identity-initialized linear autoencoder with `L = P`.
pub fn identity_autoencoder(p: usize) -> Result<Autoencoder> {
    let eye = |_: ()| {
        DenseNetwork::from_layers(vec![Layer::new(
            DMatrix::identity(p, p),
            DVector::zeros(p),
            Activation::Identity,
        )?])
    };
    Autoencoder::from_parts(eye(())?, eye(())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn low_rank(rows: usize, cols: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        random(rows, rank, seed) * random(rank, cols, seed + 1)
    }

    #[test]
    fn single_snapshot() {
        let v = DMatrix::from_column_slice(4, 1, &[3.0, 0.0, -4.0, 0.0]);
        for basis in [pod_fit(&v, 1).unwrap(), pod_fit_correlation(&v, 1).unwrap()] {
            assert_abs_diff_eq!(basis.singular_values()[0], 5.0, epsilon = 1e-12);
            let sign = basis.modes()[(0, 0)].signum();
            for (a, b) in basis.modes().iter().zip([0.6, 0.0, -0.8, 0.0]) {
                assert_abs_diff_eq!(a * sign, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_column_is_rank_one() {
        let v = random(6, 1, 3);
        let y = DMatrix::from_columns(&[v.column(0), v.column(0)]);
        let b = pod_fit(&y, 2).unwrap();
        assert!(b.singular_values()[1] / b.singular_values()[0] < 1e-12);
    }

    #[test]
    fn invalid_requests() {
        let y = random(5, 3, 1);
        assert!(pod_fit(&y, 0).is_err());
        assert!(pod_fit(&y, 4).is_err());
        let mut bad = y.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(pod_fit(&bad, 1), Err(Error::LinearAlgebra(_))));
        let rank1 = low_rank(8, 4, 1, 5);
        assert!(pod_fit_correlation(&rank1, 3).is_err());
    }

    #[test]
    fn routes_agree_on_random_matrix() {
        let y = random(8, 5, 10);
        for l in 1..=5 {
            let a = pod_fit(&y, l).unwrap();
            let b = pod_fit_correlation(&y, l).unwrap();
            assert!(max_principal_angle(a.modes(), b.modes()).unwrap() < 1e-8);
            for (x, z) in a.singular_values().iter().zip(b.singular_values()) {
                assert_abs_diff_eq!(x, z, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn routes_agree_on_graded_spectrum() {
        // singular values 1, 1e-2, ..., 1e-7
        let q1 = random(40, 5, 1).qr().q();
        let q2 = random(5, 5, 2).qr().q();
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-2, 1e-4, 1e-6, 1e-7]));
        let y = &q1 * s * q2.transpose();
        let a = pod_fit(&y, 5).unwrap();
        let b = pod_fit_correlation(&y, 5).unwrap();
        assert!(max_principal_angle(a.modes(), b.modes()).unwrap() < 1e-6);
    }

    #[test]
    fn rank_three_family_reconstructs() {
        let y = low_rank(30, 12, 3, 4);
        let b = pod_fit_correlation(&y, 3).unwrap();
        let r = Reducer::Pod(b);
        let back = r.expand_matrix(&r.compress_matrix(&y).unwrap()).unwrap();
        assert!((back - &y).amax() < 1e-8);
    }

    #[test]
    fn projection_properties() {
        let y = random(10, 6, 21);
        let b = pod_fit(&y, 3).unwrap();
        // in-span round trip
        let inside: Vec<f64> = (b.modes() * DVector::from_vec(vec![0.3, -1.2, 2.0])).as_slice().to_vec();
        let back = b.expand(&b.compress(&inside).unwrap()).unwrap();
        for (a, c) in back.iter().zip(&inside) {
            assert_abs_diff_eq!(a, c, epsilon = 1e-10);
        }
        // orthogonal complement compresses to zero
        let full = pod_fit(&y, 6).unwrap();
        let outside = full.modes().column(4).clone_owned();
        for c in b.compress(outside.as_slice()).unwrap() {
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
        }
        // residual identity: ||v - UU^T v||^2 = sum over discarded coefficients squared
        for i in 0..6 {
            let v = y.column(i).clone_owned();
            let proj = b.expand(&b.compress(v.as_slice()).unwrap()).unwrap();
            let err2: f64 = proj.iter().zip(v.iter()).map(|(p, q)| (p - q).powi(2)).sum();
            let coeffs = full.compress(v.as_slice()).unwrap();
            let discarded: f64 = coeffs[3..].iter().map(|c| c * c).sum();
            assert_abs_diff_eq!(err2, discarded, epsilon = 1e-12);
        }
        assert!(b.compress(&[1.0]).is_err());
        assert!(b.expand(&[1.0]).is_err());
    }

    #[test]
    fn energy_ordering() {
        let y = random(12, 7, 8);
        let mut last = f64::INFINITY;
        for l in 1..=7 {
            let r = Reducer::Pod(pod_fit(&y, l).unwrap());
            let err = (r.expand_matrix(&r.compress_matrix(&y).unwrap()).unwrap() - &y).norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn rank_deficient_spectra_are_accurate() {
        // the bidiagonal SVD with left vectors drifts on most of these
        for (rows, cols, rank) in [(200, 30, 3), (60, 20, 3), (30, 30, 3), (30, 200, 3), (200, 30, 10)] {
            for seed in 0..20 {
                let y = low_rank(rows, cols, rank, 1000 + seed);
                let (u, sigma) = thin_svd(&y).unwrap();
                let k = rows.min(cols);
                assert_eq!(u.shape(), (rows, k));
                assert!((u.tr_mul(&u) - DMatrix::identity(k, k)).norm() < 1e-12);
                // values-only route for comparison
                let mut expect: Vec<f64> = y.singular_values().iter().copied().collect();
                let mut got: Vec<f64> = sigma.iter().copied().collect();
                expect.sort_by(|p, q| q.total_cmp(p));
                got.sort_by(|p, q| q.total_cmp(p));
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() <= 1e-12 * expect[0], "{rows}x{cols} seed {seed}: {g} vs {e}");
                }
                // U^T Y recovers the full energy of Y
                assert_abs_diff_eq!(u.tr_mul(&y).norm(), y.norm(), epsilon = 1e-12 * y.norm());
                let pod = pod_fit(&y, rank).unwrap();
                assert!(max_principal_angle(pod.modes(), &y).unwrap() < 1e-10);
                assert!(max_principal_angle(&y, &(&y * 1.0000001)).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn pod_basis_persistence() {
        let b = pod_fit(&random(9, 4, 2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(PodBasis::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn identity_ae_is_lossless() {
        let ae = identity_autoencoder(5).unwrap();
        let v = [1.0, -2.0, 3.5, 0.0, 4.0];
        let back = ae.expand(&ae.compress(&v).unwrap()).unwrap();
        for (a, b) in back.iter().zip(v) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn ae_modes_of_pod_decoder() {
        let b = pod_fit(&random(9, 4, 6), 3).unwrap();
        let enc = DenseNetwork::from_layers(vec![Layer::new(
            b.modes().transpose(),
            DVector::zeros(3),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let dec = DenseNetwork::from_layers(vec![Layer::new(
            b.modes().clone(),
            DVector::zeros(9),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let ae = Autoencoder::from_parts(enc, dec).unwrap();
        assert_eq!(&ae_modes(&ae).unwrap(), b.modes());
    }

    #[test]
    fn nonlinear_decoder_has_no_modes() {
        let y = low_rank(20, 8, 2, 3);
        let arch = AeArchitecture {
            hidden: vec![6],
            activation: Activation::LeakyRelu,
        };
        let (ae, _) = ae_fit(&y, 2, &arch, &TrainConfig::epochs(1e-3, 5), false).unwrap();
        assert!(!ae.linear);
        assert_eq!(ae.encoder.layer_sizes(), vec![20, 6, 2]);
        assert_eq!(ae.decoder.layer_sizes(), vec![2, 6, 20]);
        assert!(ae_modes(&ae).is_err());
    }

    #[test]
    fn linear_ae_learns_the_pod_subspace() {
        let y = low_rank(40, 20, 3, 12);
        let cfg = TrainConfig::epochs(1e-2, 3000);
        let (ae, report) = ae_fit(&y, 3, &AeArchitecture::linear(), &cfg, false).unwrap();
        assert!(report.final_mse < 1e-3, "mse {}", report.final_mse);
        let pod = pod_fit(&y, 3).unwrap();
        let angle = max_principal_angle(&ae_modes(&ae).unwrap(), pod.modes()).unwrap();
        assert!(angle < 0.1, "angle {angle}");
    }

    #[test]
    fn autoencoder_json_round_trip() {
        let y = low_rank(10, 6, 2, 1);
        let (ae, _) = ae_fit(&y, 2, &AeArchitecture::linear(), &TrainConfig::epochs(1e-3, 3), true).unwrap();
        let s = serde_json::to_string(&ae).unwrap();
        let back: Autoencoder = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ae);
        assert!(s.contains("\"encoder\"") && s.contains("\"decoder\""));
    }
}
