//! Full-order model abstraction: anything mapping an inlet field to a wake
//! field, plus the snapshot corpus built from it.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{inlet_from_params, ParamVector, PerturbationScheme};
use crate::error::{Error, Result};
use crate::field::{csv_err, read_numeric_csv, same_geometry, PlaneGeometry, ScalarField};
use crate::neuralnet::DenseNetwork;

/// Deterministic inlet-to-wake map.
pub trait SnapshotProvider: Send + Sync {
    fn solve(&self, inlet: &ScalarField) -> Result<ScalarField>;
    fn geometry(&self) -> &Arc<PlaneGeometry>;
    fn describe(&self) -> String;
}

/// Returns the inlet unchanged.
#[derive(Debug, Clone)]
pub struct IdentityProvider {
    geometry: Arc<PlaneGeometry>,
}

impl IdentityProvider {
    pub fn new(geometry: Arc<PlaneGeometry>) -> Self {
        Self { geometry }
    }
}

impl SnapshotProvider for IdentityProvider {
    fn solve(&self, inlet: &ScalarField) -> Result<ScalarField> {
        check_on(&self.geometry, inlet)?;
        Ok(inlet.clone())
    }

    fn geometry(&self) -> &Arc<PlaneGeometry> {
        &self.geometry
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

fn check_on(geometry: &Arc<PlaneGeometry>, inlet: &ScalarField) -> Result<()> {
    if !same_geometry(geometry, inlet.geometry()) {
        return Err(Error::GeometryMismatch("inlet is not on the provider geometry".into()));
    }
    Ok(())
}

/// Desk-scale stand-in for a flow solve: normalized Gaussian smoothing over
/// the plane, scaled by an attenuation factor, optionally followed by a
/// pointwise `s * tanh(x / s)` saturation.
#[derive(Debug)]
pub struct SyntheticTransport {
    pub blur_radius: f64,
    pub attenuation: f64,
    pub saturation: Option<f64>,
    geometry: Arc<PlaneGeometry>,
    kernel: OnceLock<DMatrix<f64>>,
}

/// Geometries up to this size get a cached dense kernel.
const DENSE_KERNEL_LIMIT: usize = 3000;

impl SyntheticTransport {
    pub fn new(geometry: Arc<PlaneGeometry>, blur_radius: f64, attenuation: f64) -> Result<Self> {
        if !(blur_radius >= 0.0 && blur_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur radius {blur_radius} must be >= 0")));
        }
        if !(attenuation > 0.0 && attenuation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "attenuation {attenuation} must lie in (0, 1]"
            )));
        }
        Ok(Self {
            blur_radius,
            attenuation,
            saturation: None,
            geometry,
            kernel: OnceLock::new(),
        })
    }

    pub fn with_saturation(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("saturation scale {scale} must be > 0")));
        }
        self.saturation = Some(scale);
        Ok(self)
    }

    fn kernel_row(&self, pts: &[(f64, f64)], j: usize, out: &mut [f64]) {
        let (xj, yj) = pts[j];
        if self.blur_radius == 0.0 {
            out.fill(0.0);
            out[j] = 1.0;
            return;
        }
        let inv = 1.0 / (2.0 * self.blur_radius * self.blur_radius);
        let mut total = 0.0;
        for (w, &(xk, yk)) in out.iter_mut().zip(pts) {
            let d2 = (xj - xk).powi(2) + (yj - yk).powi(2);
            *w = (-d2 * inv).exp();
            total += *w;
        }
        for w in out.iter_mut() {
            *w /= total;
        }
    }

    fn dense_kernel(&self) -> &DMatrix<f64> {
        self.kernel.get_or_init(|| {
            let pts = self.geometry.cartesian_points();
            let n = pts.len();
            let mut k = DMatrix::zeros(n, n);
            let mut row = vec![0.0; n];
            for j in 0..n {
                self.kernel_row(&pts, j, &mut row);
                for (c, &w) in row.iter().enumerate() {
                    k[(j, c)] = w;
                }
            }
            k
        })
    }

    fn smooth(&self, values: &[f64]) -> Vec<f64> {
        let n = values.len();
        if n <= DENSE_KERNEL_LIMIT {
            let v = DVector::from_column_slice(values);
            (self.dense_kernel() * v).as_slice().to_vec()
        } else {
            let pts = self.geometry.cartesian_points();
            let mut row = vec![0.0; n];
            (0..n)
                .map(|j| {
                    self.kernel_row(&pts, j, &mut row);
                    row.iter().zip(values).map(|(w, v)| w * v).sum()
                })
                .collect()
        }
    }
}

impl SnapshotProvider for SyntheticTransport {
    fn solve(&self, inlet: &ScalarField) -> Result<ScalarField> {
        check_on(&self.geometry, inlet)?;
        let mut wake = self.smooth(inlet.values());
        for v in &mut wake {
            *v *= self.attenuation;
            if let Some(s) = self.saturation {
                *v = s * (*v / s).tanh();
            }
        }
        ScalarField::new(self.geometry.clone(), wake)
    }

    fn geometry(&self) -> &Arc<PlaneGeometry> {
        &self.geometry
    }

    fn describe(&self) -> String {
        match self.saturation {
            None => format!(
                "synthetic transport (blur {}, attenuation {})",
                self.blur_radius, self.attenuation
            ),
            Some(s) => format!(
                "synthetic transport (blur {}, attenuation {}, saturation {s})",
                self.blur_radius, self.attenuation
            ),
        }
    }
}

pub fn synthetic_solve(inlet: &ScalarField, op: &SyntheticTransport) -> Result<ScalarField> {
    op.solve(inlet)
}

/// Parameter vectors paired with full-order wakes: the ROM training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    params: Vec<Vec<f64>>,
    /// `P x M`, one snapshot per column.
    wakes: DMatrix<f64>,
    geometry: Arc<PlaneGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    #[serde(rename = "M")]
    pub m: usize,
    pub p: usize,
    #[serde(rename = "P")]
    pub dof: usize,
    pub provider: String,
    pub rng_seed: Option<u64>,
}

impl SnapshotSet {
    pub fn new(params: Vec<Vec<f64>>, wakes: DMatrix<f64>, geometry: Arc<PlaneGeometry>) -> Result<Self> {
        if params.len() != wakes.ncols() {
            return Err(Error::CountMismatch(format!(
                "{} parameter rows but {} wake columns",
                params.len(),
                wakes.ncols()
            )));
        }
        if wakes.nrows() != geometry.len() {
            return Err(Error::Dimension {
                context: "snapshot length",
                expected: geometry.len(),
                actual: wakes.nrows(),
            });
        }
        if let Some(first) = params.first() {
            if let Some(i) = params.iter().position(|p| p.len() != first.len()) {
                return Err(Error::Dimension {
                    context: "parameter row",
                    expected: first.len(),
                    actual: params[i].len(),
                });
            }
        }
        if wakes.iter().chain(params.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("snapshot set contains non-finite values".into()));
        }
        Ok(Self {
            params,
            wakes,
            geometry,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.params.first().map_or(0, Vec::len)
    }

    pub fn dof(&self) -> usize {
        self.wakes.nrows()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// The snapshot matrix `Y` (`P x M`).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.wakes
    }

    pub fn geometry(&self) -> &Arc<PlaneGeometry> {
        &self.geometry
    }

    pub fn wake(&self, i: usize) -> ScalarField {
        ScalarField::new(self.geometry.clone(), self.wakes.column(i).as_slice().to_vec())
            .expect("snapshot columns match the geometry")
    }

    /// Snapshots at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<SnapshotSet> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("snapshot index {bad} out of range")));
        }
        let params = indices.iter().map(|&i| self.params[i].clone()).collect();
        let wakes = self.wakes.select_columns(indices);
        SnapshotSet::new(params, wakes, self.geometry.clone())
    }

    /// Writes `params.csv`, `wakes.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path, provider: &str, rng_seed: Option<u64>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = self.param_dim();

        let path = dir.join("params.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record((1..=p).map(|k| format!("mu_{k}"))).map_err(|e| csv_err(&path, e))?;
        for row in &self.params {
            w.write_record(row.iter().map(f64::to_string)).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("wakes.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let header = ["r".to_string(), "theta".to_string()]
            .into_iter()
            .chain((1..=self.len()).map(|k| format!("snap_{k}")));
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for (i, &(r, t)) in self.geometry.polar().iter().enumerate() {
            let row = self.wakes.row(i);
            let rec = [r, t].into_iter().chain(row.iter().copied());
            w.write_record(rec.map(|v| v.to_string())).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let meta = SnapshotMeta {
            m: self.len(),
            p,
            dof: self.dof(),
            provider: provider.to_string(),
            rng_seed,
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a snapshot directory; `meta.json` is optional but checked when present.
    pub fn load(dir: &Path) -> Result<SnapshotSet> {
        let ppath = dir.join("params.csv");
        let params = read_params_csv(&ppath)?;

        let wpath = dir.join("wakes.csv");
        let rows = read_numeric_csv(&wpath, &["r", "theta"])?;
        let m = rows[0].len() - 2;
        if params.len() != m {
            return Err(Error::CountMismatch(format!(
                "params.csv has {} rows but wakes.csv has {m} snapshot columns",
                params.len()
            )));
        }
        let geometry = PlaneGeometry::from_polar(rows.iter().map(|r| (r[0], r[1])).collect())
            .map_err(|e| Error::malformed(&wpath, e))?;
        let wakes = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j + 2]);
        let set = SnapshotSet::new(params, wakes, Arc::new(geometry))
            .map_err(|e| Error::malformed(&wpath, e))?;

        let mpath = dir.join("meta.json");
        if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let meta: SnapshotMeta =
                serde_json::from_str(&text).map_err(|e| Error::malformed(&mpath, e))?;
            if meta.m != set.len() || meta.dof != set.dof() || meta.p != set.param_dim() {
                return Err(Error::CountMismatch(format!(
                    "meta.json declares M={}, p={}, P={} but files hold M={}, p={}, P={}",
                    meta.m,
                    meta.p,
                    meta.dof,
                    set.len(),
                    set.param_dim(),
                    set.dof()
                )));
            }
        }
        Ok(set)
    }
}

fn read_params_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    for (k, h) in header.iter().enumerate() {
        if h.trim() != format!("mu_{}", k + 1) {
            return Err(Error::malformed(path, format!("column {k} is '{h}', expected mu_{}", k + 1)));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::malformed(path, format!("row {}: {e}", line + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Solves the provider for the inlet generated by every parameter vector.
pub fn generate_snapshots(
    net: &DenseNetwork,
    scheme: &PerturbationScheme,
    mu_list: &[ParamVector],
    provider: &dyn SnapshotProvider,
) -> Result<SnapshotSet> {
    let geometry = provider.geometry().clone();
    let wakes: Vec<Vec<f64>> = mu_list
        .par_iter()
        .enumerate()
        .map(|(index, mu)| {
            inlet_from_params(net, scheme, mu, &geometry)
                .and_then(|inlet| provider.solve(&inlet))
                .map(ScalarField::into_values)
                .map_err(|e| Error::Snapshot {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let cols: Vec<DVector<f64>> = wakes.into_iter().map(DVector::from_vec).collect();
    let matrix = if cols.is_empty() {
        DMatrix::zeros(geometry.len(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    SnapshotSet::new(
        mu_list.iter().map(|m| m.values().to_vec()).collect(),
        matrix,
        geometry,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::network_field;
    use crate::neuralnet::Activation;
    use approx::assert_abs_diff_eq;

    fn disc() -> Arc<PlaneGeometry> {
        Arc::new(PlaneGeometry::polar_disc(1.0, 6, 12).unwrap())
    }

    /// Direct double loop over points, written independently of the provider.
    fn brute_force_blur(g: &PlaneGeometry, values: &[f64], sigma: f64, gamma: f64) -> Vec<f64> {
        let pts: Vec<(f64, f64)> = g
            .polar()
            .iter()
            .map(|&(r, t)| (r * t.cos(), r * t.sin()))
            .collect();
        let mut out = Vec::new();
        for a in &pts {
            let mut num = 0.0;
            let mut den = 0.0;
            for (b, v) in pts.iter().zip(values) {
                let w = (-((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)) / (2.0 * sigma * sigma)).exp();
                num += w * v;
                den += w;
            }
            out.push(gamma * num / den);
        }
        out
    }

    #[test]
    fn constants_are_preserved_up_to_attenuation() {
        let g = disc();
        let op = SyntheticTransport::new(g.clone(), 0.3, 0.8).unwrap();
        let inlet = ScalarField::from_polar_fn(g, |_, _| -2.5).unwrap();
        let wake = synthetic_solve(&inlet, &op).unwrap();
        for v in wake.values() {
            assert_abs_diff_eq!(*v, 0.8 * -2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn vanishing_blur_is_identity() {
        let g = disc();
        let inlet = ScalarField::from_polar_fn(g.clone(), |r, t| r * t.sin() + 1.0).unwrap();
        for sigma in [0.0, 1e-9] {
            let op = SyntheticTransport::new(g.clone(), sigma, 1.0).unwrap();
            let wake = op.solve(&inlet).unwrap();
            for (a, b) in wake.values().iter().zip(inlet.values()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn point_mass_matches_brute_force() {
        let g = disc();
        let mut values = vec![0.0; g.len()];
        values[0] = 1.0;
        let inlet = ScalarField::new(g.clone(), values.clone()).unwrap();
        let op = SyntheticTransport::new(g.clone(), 0.2, 0.9).unwrap();
        let wake = op.solve(&inlet).unwrap();
        let oracle = brute_force_blur(&g, &values, 0.2, 0.9);
        for (a, b) in wake.values().iter().zip(&oracle) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn streaming_kernel_matches_dense() {
        let g = Arc::new(PlaneGeometry::polar_disc(1.0, 60, 55).unwrap());
        assert!(g.len() > DENSE_KERNEL_LIMIT);
        let inlet = ScalarField::from_polar_fn(g.clone(), |r, t| r * t.cos()).unwrap();
        let op = SyntheticTransport::new(g.clone(), 0.15, 1.0).unwrap();
        let wake = op.solve(&inlet).unwrap();
        let oracle = brute_force_blur(&g, inlet.values(), 0.15, 1.0);
        for k in (0..g.len()).step_by(97) {
            assert_abs_diff_eq!(wake.values()[k], oracle[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn linearity_and_determinism() {
        let g = disc();
        let op = SyntheticTransport::new(g.clone(), 0.25, 0.7).unwrap();
        let u = ScalarField::from_polar_fn(g.clone(), |r, t| (3.0 * r).sin() + t.cos()).unwrap();
        let v = ScalarField::from_polar_fn(g.clone(), |r, t| r * r - t.sin()).unwrap();
        let (a, b) = (1.7, -0.4);
        let combo = ScalarField::new(
            g.clone(),
            u.values().iter().zip(v.values()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = op.solve(&combo).unwrap();
        let (su, sv) = (op.solve(&u).unwrap(), op.solve(&v).unwrap());
        for i in 0..g.len() {
            assert_abs_diff_eq!(lhs.values()[i], a * su.values()[i] + b * sv.values()[i], epsilon = 1e-10);
        }
        assert_eq!(op.solve(&u).unwrap(), su);
    }

    #[test]
    fn saturation_bounds_output() {
        let g = disc();
        let op = SyntheticTransport::new(g.clone(), 0.2, 1.0).unwrap().with_saturation(2.0).unwrap();
        let inlet = ScalarField::from_polar_fn(g, |r, _| 10.0 * r - 5.0).unwrap();
        assert!(op.solve(&inlet).unwrap().values().iter().all(|v| v.abs() < 2.0));
    }

    #[test]
    fn rejects_foreign_geometry() {
        let op = SyntheticTransport::new(disc(), 0.2, 1.0).unwrap();
        let other = Arc::new(PlaneGeometry::polar_disc(2.0, 3, 3).unwrap());
        let inlet = ScalarField::from_polar_fn(other, |_, _| 1.0).unwrap();
        assert!(matches!(op.solve(&inlet), Err(Error::GeometryMismatch(_))));
    }

    fn net() -> DenseNetwork {
        DenseNetwork::mlp(2, &[10, 5, 3], 1, Activation::Softplus, Activation::Identity, 4).unwrap()
    }

    #[test]
    fn generate_examples() {
        let g = disc();
        let net = net();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let id = IdentityProvider::new(g.clone());
        let zero = ParamVector::unbounded(vec![0.0; 4]);
        let set = generate_snapshots(&net, &scheme, &[zero.clone()], &id).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.wake(0), network_field(&net, &g).unwrap());

        let mus = crate::boundary::sample_param_vectors(4, 100, (-0.5, 0.5), 3).unwrap();
        let op = SyntheticTransport::new(g.clone(), 0.2, 0.9).unwrap();
        let set = generate_snapshots(&net, &scheme, &mus, &op).unwrap();
        assert_eq!((set.len(), set.param_dim(), set.dof()), (100, 4, g.len()));

        let dup = vec![mus[0].clone(), mus[0].clone()];
        let set = generate_snapshots(&net, &scheme, &dup, &op).unwrap();
        assert_eq!(set.matrix().column(0), set.matrix().column(1));
    }

    #[test]
    fn provider_failure_carries_index() {
        let net = net();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let op = IdentityProvider::new(disc());
        let mus = vec![
            ParamVector::unbounded(vec![0.0; 4]),
            ParamVector::unbounded(vec![0.0; 3]),
        ];
        match generate_snapshots(&net, &scheme, &mus, &op) {
            Err(Error::Snapshot { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let g = disc();
        let net = net();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let mus = crate::boundary::sample_param_vectors(4, 7, (-0.5, 0.5), 9).unwrap();
        let op = SyntheticTransport::new(g, 0.2, 0.9).unwrap();
        let set = generate_snapshots(&net, &scheme, &mus, &op).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path(), &op.describe(), Some(9)).unwrap();
        let back = SnapshotSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn hand_built_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("params.csv"), "mu_1,mu_2\n0.1,-0.2\n0.3,0.4\n").unwrap();
        std::fs::write(
            dir.path().join("wakes.csv"),
            "r,theta,snap_1,snap_2\n0,0,1.5,2.5\n1,0,-1,3\n1,3.14159,0.25,0.5\n",
        )
        .unwrap();
        let set = SnapshotSet::load(dir.path()).unwrap();
        assert_eq!((set.len(), set.dof(), set.param_dim()), (2, 3, 2));
        assert_eq!(set.matrix()[(1, 1)], 3.0);
        assert_eq!(set.params()[1], vec![0.3, 0.4]);
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("params.csv"), "mu_1\n0.1\n0.2\n0.3\n").unwrap();
        std::fs::write(dir.path().join("wakes.csv"), "r,theta,snap_1,snap_2\n0,0,1,2\n").unwrap();
        let err = SnapshotSet::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CountMismatch(_)));
        assert!(err.to_string().contains("count mismatch"));

        std::fs::write(dir.path().join("wakes.csv"), "r,theta,snap_1\n0,0,oops\n").unwrap();
        assert!(matches!(SnapshotSet::load(dir.path()), Err(Error::Malformed { .. })));
    }
}
