//! Scalar distributions sampled on planar point sets, the two analytic wake
//! targets, and their CSV representations.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed, ordered set of points in the plane, stored in polar coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneGeometry {
    points: Vec<(f64, f64)>,
}

impl PlaneGeometry {
    /// Builds a geometry from `(r, theta)` pairs.
    pub fn from_polar(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("geometry needs at least one point".into()));
        }
        for (i, &(r, theta)) in points.iter().enumerate() {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::InvalidArgument(format!("point {i}: radius {r} is not >= 0")));
            }
            if !(0.0..TAU).contains(&theta) {
                return Err(Error::InvalidArgument(format!(
                    "point {i}: angle {theta} outside [0, 2pi)"
                )));
            }
        }
        Ok(Self { points })
    }

    /// Regular polar sampling of a disc: the center plus `n_radial` rings of
    /// `n_angular` equispaced angles, the outermost ring at `radius`.
    ///
    /// `polar_disc(1.18, 100, 100)` gives the 10001-point layout.
    pub fn polar_disc(radius: f64, n_radial: usize, n_angular: usize) -> Result<Self> {
        if !(radius > 0.0) || n_radial == 0 || n_angular == 0 {
            return Err(Error::InvalidArgument(format!(
                "polar disc needs radius > 0 and positive counts, got ({radius}, {n_radial}, {n_angular})"
            )));
        }
        let mut points = Vec::with_capacity(n_radial * n_angular + 1);
        points.push((0.0, 0.0));
        for i in 1..=n_radial {
            let r = radius * i as f64 / n_radial as f64;
            for j in 0..n_angular {
                points.push((r, TAU * j as f64 / n_angular as f64));
            }
        }
        Self::from_polar(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn polar(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn cartesian(&self, i: usize) -> (f64, f64) {
        let (r, theta) = self.points[i];
        (r * theta.cos(), r * theta.sin())
    }

    pub fn cartesian_points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.cartesian(i)).collect()
    }

    /// Index of the geometry point closest (Euclidean) to `(x, y)`.
    pub fn nearest(&self, x: f64, y: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.len() {
            let (px, py) = self.cartesian(i);
            let d = (px - x).powi(2) + (py - y).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Values of a scalar quantity at every point of a geometry.
#[derive(Debug, Clone)]
pub struct ScalarField {
    geometry: Arc<PlaneGeometry>,
    values: Vec<f64>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        same_geometry(&self.geometry, &other.geometry) && self.values == other.values
    }
}

pub(crate) fn same_geometry(a: &Arc<PlaneGeometry>, b: &Arc<PlaneGeometry>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

impl ScalarField {
    pub fn new(geometry: Arc<PlaneGeometry>, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Dimension {
                context: "scalar field values",
                expected: geometry.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "field value at point {i} is not finite"
            )));
        }
        Ok(Self { geometry, values })
    }

    /// Samples `f(r, theta)` at every point.
    pub fn from_polar_fn(geometry: Arc<PlaneGeometry>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = geometry.polar().iter().map(|&(r, t)| f(r, t)).collect();
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &Arc<PlaneGeometry> {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Pointwise measurements `(x, y, value)` in Cartesian coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    samples: Vec<(f64, f64, f64)>,
}

impl ObservationSet {
    pub fn new(samples: Vec<(f64, f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("observation set is empty".into()));
        }
        for i in 0..samples.len() {
            for j in 0..i {
                if samples[i].0 == samples[j].0 && samples[i].1 == samples[j].1 {
                    return Err(Error::InvalidArgument(format!(
                        "observations {j} and {i} share location ({}, {})",
                        samples[i].0, samples[i].1
                    )));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Observation locations as polar `(r, theta)` with theta in `[0, 2pi)`.
    pub fn polar_locations(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|&(x, y, _)| to_polar(x, y)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.2).collect()
    }
}

pub fn to_polar(x: f64, y: f64) -> (f64, f64) {
    let r = x.hypot(y);
    let mut theta = y.atan2(x);
    if theta < 0.0 {
        theta += TAU;
    }
    // atan2 of a tiny negative y can round up to exactly 2pi
    if theta >= TAU {
        theta = 0.0;
    }
    (r, theta)
}

/// Radially symmetric ringed target `(sin 4r)^2 - 10`.
pub fn target_smooth(r: f64) -> f64 {
    (4.0 * r).sin().powi(2) - 10.0
}

/// Pointwise target `sin(pi x) sin((y + 0.2) pi) / 1.2^(e^(x + y))`.
pub fn target_pointwise(x: f64, y: f64) -> f64 {
    (PI * x).sin() * ((y + 0.2) * PI).sin() / 1.2f64.powf((x + y).exp())
}

/// Samples `f` on an `n_per_axis x n_per_axis` equispaced grid covering
/// `[-side/2, side/2]^2`, x varying fastest.
pub fn make_observation_grid(
    side: f64,
    n_per_axis: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Result<ObservationSet> {
    if n_per_axis < 2 {
        return Err(Error::InvalidArgument(format!(
            "observation grid needs at least 2 points per axis, got {n_per_axis}"
        )));
    }
    let half = side / 2.0;
    let step = side / (n_per_axis - 1) as f64;
    let coord = |k: usize| {
        if k == n_per_axis - 1 {
            half
        } else {
            -half + step * k as f64
        }
    };
    let mut samples = Vec::with_capacity(n_per_axis * n_per_axis);
    for j in 0..n_per_axis {
        for i in 0..n_per_axis {
            let (x, y) = (coord(i), coord(j));
            samples.push((x, y, f(x, y)));
        }
    }
    ObservationSet::new(samples)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||pred - truth|| / ||truth||` on raw slices.
pub fn relative_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            context: "relative error",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let denom = norm(truth);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("relative error against a zero-norm truth".into()));
    }
    let num = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Relative error restricted to the points listed in `mask` (all points when `None`).
pub fn masked_relative_error(pred: &[f64], truth: &[f64], mask: Option<&[usize]>) -> Result<f64> {
    match mask {
        None => relative_error(pred, truth),
        Some(idx) => {
            if pred.len() != truth.len() {
                return Err(Error::Dimension {
                    context: "relative error",
                    expected: truth.len(),
                    actual: pred.len(),
                });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= truth.len()) {
                return Err(Error::InvalidArgument(format!("mask index {bad} out of range")));
            }
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            relative_error(&p, &t)
        }
    }
}

pub fn field_relative_error(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    if !same_geometry(&pred.geometry, &truth.geometry) {
        return Err(Error::GeometryMismatch(
            "relative error between fields on different geometries".into(),
        ));
    }
    relative_error(&pred.values, &truth.values)
}

pub fn write_field_csv(path: &Path, field: &ScalarField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["r", "theta", "value"]).map_err(|e| csv_err(path, e))?;
    for (&(r, t), v) in field.geometry.polar().iter().zip(&field.values) {
        w.write_record([r.to_string(), t.to_string(), v.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_field_csv(path: &Path) -> Result<ScalarField> {
    let rows = read_numeric_csv(path, &["r", "theta", "value"])?;
    let points = rows.iter().map(|r| (r[0], r[1])).collect();
    let geometry = PlaneGeometry::from_polar(points).map_err(|e| Error::malformed(path, e))?;
    let values = rows.iter().map(|r| r[2]).collect();
    ScalarField::new(Arc::new(geometry), values).map_err(|e| Error::malformed(path, e))
}

pub fn write_observations_csv(path: &Path, obs: &ObservationSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["x", "y", "value"]).map_err(|e| csv_err(path, e))?;
    for &(x, y, v) in &obs.samples {
        w.write_record([x.to_string(), y.to_string(), v.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_observations_csv(path: &Path) -> Result<ObservationSet> {
    let rows = read_numeric_csv(path, &["x", "y", "value"])?;
    ObservationSet::new(rows.into_iter().map(|r| (r[0], r[1], r[2])).collect())
        .map_err(|e| Error::malformed(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::malformed(path, format!("{other:?}")),
    }
}

/// Reads a headed CSV of floats, checking the header against `expected`
/// (a prefix match when `expected` is shorter than the header).
pub(crate) fn read_numeric_csv(path: &Path, expected: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < expected.len()
        || expected.iter().zip(header.iter()).any(|(a, b)| *a != b.trim())
    {
        return Err(Error::malformed(
            path,
            format!("expected header starting with {expected:?}, found {header:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::malformed(path, format!("row {}: {e}", line + 1)))?;
        if row.len() != header.len() {
            return Err(Error::malformed(path, format!("row {} has {} columns", line + 1, row.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::malformed(path, "no data rows"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn disc() -> Arc<PlaneGeometry> {
        Arc::new(PlaneGeometry::polar_disc(1.0, 5, 8).unwrap())
    }

    #[test]
    fn smooth_target_values() {
        assert_eq!(target_smooth(0.0), -10.0);
        assert_abs_diff_eq!(target_smooth(PI / 8.0), -9.0, epsilon = 1e-15);
        // (sin 1.2)^2 - 10 with sin 1.2 = 0.932039085967226...
        assert_abs_diff_eq!(target_smooth(0.3), 0.932039085967226f64.powi(2) - 10.0, epsilon = 1e-14);
        assert!((target_smooth(0.3) - (-9.131303)).abs() < 1e-6);
    }

    #[test]
    fn pointwise_target_values() {
        assert_eq!(target_pointwise(0.0, 0.3), 0.0);
        assert_abs_diff_eq!(target_pointwise(0.5, -0.2), 0.0, epsilon = 1e-16);
        // 1 / 1.2^(e^0.8), e^0.8 = 2.225540928492468
        let expected = 1.0 / (2.225540928492468 * 1.2f64.ln()).exp();
        assert_abs_diff_eq!(target_pointwise(0.5, 0.3), expected, epsilon = 1e-14);
        assert!((expected - 0.6664).abs() < 1e-3);
    }

    #[test]
    fn observation_grid_layout() {
        let obs = make_observation_grid(1.0, 6, target_pointwise).unwrap();
        assert_eq!(obs.len(), 36);
        for &(x, y, _) in obs.samples() {
            assert!((-0.5..=0.5).contains(&x) && (-0.5..=0.5).contains(&y));
        }
        let corner = obs.samples()[0];
        assert_eq!((corner.0, corner.1), (-0.5, -0.5));
        let expected = (-0.5 * PI).sin() * (-0.3 * PI).sin() / 1.2f64.powf((-1.0f64).exp());
        assert_abs_diff_eq!(corner.2, expected, epsilon = 1e-15);
        assert!((corner.2 - 0.7567).abs() < 1e-3);
        assert_eq!(obs.samples()[35].0, 0.5);
        assert_eq!(obs.samples()[35].1, 0.5);

        let four = make_observation_grid(1.0, 2, |_, _| 1.0).unwrap();
        let locs: Vec<_> = four.samples().iter().map(|s| (s.0, s.1)).collect();
        assert_eq!(locs, vec![(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)]);

        assert!(make_observation_grid(1.0, 1, |_, _| 0.0).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let g = disc();
        let truth = ScalarField::from_polar_fn(g.clone(), |r, t| 1.0 + r * t.cos()).unwrap();
        assert_eq!(field_relative_error(&truth, &truth).unwrap(), 0.0);
        let doubled =
            ScalarField::new(g.clone(), truth.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_abs_diff_eq!(field_relative_error(&doubled, &truth).unwrap(), 1.0, epsilon = 1e-15);

        let mut bumped = truth.values().to_vec();
        bumped[3] += 0.1 * truth.norm();
        let bumped = ScalarField::new(g.clone(), bumped).unwrap();
        assert_abs_diff_eq!(field_relative_error(&bumped, &truth).unwrap(), 0.1, epsilon = 1e-14);
    }

    #[test]
    fn relative_error_rejects_bad_inputs() {
        let g = disc();
        let other = Arc::new(PlaneGeometry::polar_disc(2.0, 5, 8).unwrap());
        let a = ScalarField::from_polar_fn(g.clone(), |_, _| 1.0).unwrap();
        let b = ScalarField::from_polar_fn(other, |_, _| 1.0).unwrap();
        assert!(matches!(field_relative_error(&a, &b), Err(Error::GeometryMismatch(_))));
        let zero = ScalarField::from_polar_fn(g, |_, _| 0.0).unwrap();
        assert!(field_relative_error(&a, &zero).is_err());
    }

    #[test]
    fn geometry_invariants() {
        let g = PlaneGeometry::polar_disc(1.18, 100, 100).unwrap();
        assert_eq!(g.len(), 10001);
        assert!(PlaneGeometry::from_polar(vec![]).is_err());
        assert!(PlaneGeometry::from_polar(vec![(-1.0, 0.0)]).is_err());
        assert!(PlaneGeometry::from_polar(vec![(1.0, TAU)]).is_err());
        assert_eq!(to_polar(1.0, -1e-300).1, 0.0);
    }

    #[test]
    fn field_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let f = ScalarField::from_polar_fn(disc(), |r, t| target_smooth(r) + 0.1 * t.sin()).unwrap();
        write_field_csv(&path, &f).unwrap();
        let back = read_field_csv(&path).unwrap();
        assert_eq!(back, f);

        let opath = dir.path().join("o.csv");
        let obs = make_observation_grid(1.0, 6, target_pointwise).unwrap();
        write_observations_csv(&opath, &obs).unwrap();
        assert_eq!(read_observations_csv(&opath).unwrap(), obs);
    }

    proptest::proptest! {
        #[test]
        fn relative_error_scale_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 41),
                                          noise in proptest::collection::vec(-1.0f64..1.0, 41),
                                          c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
            let g = disc();
            proptest::prop_assume!(norm(&vals) > 1e-3);
            let truth = ScalarField::new(g.clone(), vals.clone()).unwrap();
            let pred = ScalarField::new(g.clone(), vals.iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
            let e = field_relative_error(&pred, &truth).unwrap();
            proptest::prop_assert!(e >= 0.0);
            let st = ScalarField::new(g.clone(), truth.values().iter().map(|v| c * v).collect()).unwrap();
            let sp = ScalarField::new(g, pred.values().iter().map(|v| c * v).collect()).unwrap();
            let es = field_relative_error(&sp, &st).unwrap();
            proptest::prop_assert!((e - es).abs() <= 1e-12 * (1.0 + e));
        }

        #[test]
        fn smooth_target_is_radial(r in 0.0f64..2.0, t1 in 0.0f64..6.28, t2 in 0.0f64..6.28) {
            let g = Arc::new(PlaneGeometry::from_polar(vec![(r, t1), (r, t2)]).unwrap());
            let f = ScalarField::from_polar_fn(g, |r, _| target_smooth(r)).unwrap();
            proptest::prop_assert_eq!(f.values()[0], f.values()[1]);
        }

        #[test]
        fn grid_count_and_bounds(n in 2usize..12, side in 0.1f64..4.0) {
            let obs = make_observation_grid(side, n, |x, y| x + y).unwrap();
            proptest::prop_assert_eq!(obs.len(), n * n);
            for &(x, y, _) in obs.samples() {
                proptest::prop_assert!(x.abs() <= side / 2.0 && y.abs() <= side / 2.0);
            }
        }
    }

    use proptest::prop_oneof;
}
