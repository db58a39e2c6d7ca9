//! ROM variants (reducer + regressor) and the train/test sensitivity sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{csv_err, masked_relative_error, PlaneGeometry, ScalarField};
use crate::fullorder::SnapshotSet;
use crate::neuralnet::{Activation, TrainConfig};
use crate::reduction::{ae_fit, pod_fit, AeArchitecture, Autoencoder, PodBasis, Reducer};
use crate::regression::{ann_fit, rbf_fit, rows_of, AnnConfig, AnnRegressor, RbfModel, Regressor};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RomVariant {
    #[serde(rename = "POD-RBF")]
    PodRbf,
    #[serde(rename = "POD-ANN")]
    PodAnn,
    #[serde(rename = "linAE-RBF")]
    LinAeRbf,
    #[serde(rename = "linAE-ANN")]
    LinAeAnn,
    #[serde(rename = "nonlinAE-RBF")]
    NonlinAeRbf,
    #[serde(rename = "nonlinAE-ANN")]
    NonlinAeAnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReducerKind {
    Pod,
    LinearAe,
    NonlinearAe,
}

impl RomVariant {
    pub const ALL: [RomVariant; 6] = [
        RomVariant::PodRbf,
        RomVariant::PodAnn,
        RomVariant::LinAeRbf,
        RomVariant::LinAeAnn,
        RomVariant::NonlinAeRbf,
        RomVariant::NonlinAeAnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RomVariant::PodRbf => "POD-RBF",
            RomVariant::PodAnn => "POD-ANN",
            RomVariant::LinAeRbf => "linAE-RBF",
            RomVariant::LinAeAnn => "linAE-ANN",
            RomVariant::NonlinAeRbf => "nonlinAE-RBF",
            RomVariant::NonlinAeAnn => "nonlinAE-ANN",
        }
    }

    pub fn reducer_kind(self) -> ReducerKind {
        match self {
            RomVariant::PodRbf | RomVariant::PodAnn => ReducerKind::Pod,
            RomVariant::LinAeRbf | RomVariant::LinAeAnn => ReducerKind::LinearAe,
            RomVariant::NonlinAeRbf | RomVariant::NonlinAeAnn => ReducerKind::NonlinearAe,
        }
    }

    pub fn uses_ann(self) -> bool {
        matches!(self, RomVariant::PodAnn | RomVariant::LinAeAnn | RomVariant::NonlinAeAnn)
    }

    /// No network anywhere, so results do not depend on seeds.
    pub fn is_deterministic(self) -> bool {
        self == RomVariant::PodRbf
    }

    /// Position in [`RomVariant::ALL`].
    pub fn index(self) -> u64 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u64
    }
}

impl fmt::Display for RomVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RomVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown ROM variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeSettings {
    pub architecture: AeArchitecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub standardize: bool,
}

/// Network settings for every reducer and regressor a variant may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RomSettings {
    pub rbf_epsilon: f64,
    pub linear_ae: AeSettings,
    pub nonlinear_ae: AeSettings,
    pub ann_pod: AnnConfig,
    pub ann_linear_ae: AnnConfig,
    pub ann_nonlinear_ae: AnnConfig,
}

fn softplus_ann(hidden: Vec<usize>, lr: f64, epochs: usize, target: f64) -> AnnConfig {
    AnnConfig {
        hidden,
        activation: Activation::Softplus,
        train: TrainConfig {
            target_loss: Some(target),
            ..TrainConfig::epochs(lr, epochs)
        },
        standardize: true,
    }
}

impl RomSettings {
    /// Smooth-target settings.
    pub fn case1() -> Self {
        Self {
            rbf_epsilon: 1.0,
            linear_ae: AeSettings {
                architecture: AeArchitecture::linear(),
                train: TrainConfig::epochs(1e-3, 1000),
                standardize: false,
            },
            nonlinear_ae: AeSettings {
                architecture: AeArchitecture {
                    hidden: vec![200],
                    activation: Activation::LeakyRelu,
                },
                train: TrainConfig {
                    target_loss: Some(5e-4),
                    weight_decay: 5e-4,
                    ..TrainConfig::epochs(5e-4, 5000)
                },
                standardize: false,
            },
            ann_pod: softplus_ann(vec![4, 4], 5e-3, 200_000, 1e-3),
            ann_linear_ae: softplus_ann(vec![4, 4], 5e-3, 100_000, 1e-4),
            ann_nonlinear_ae: softplus_ann(vec![40, 40], 5e-3, 100_000, 1e-5),
        }
    }

    /// Pointwise-observation settings. The regressor has only a loss target;
    /// `max_epochs` caps it.
    pub fn case2() -> Self {
        let ann = softplus_ann(vec![40, 20, 10], 2e-3, 200_000, 0.1);
        Self {
            rbf_epsilon: 1.0,
            linear_ae: AeSettings {
                architecture: AeArchitecture::linear(),
                train: TrainConfig::epochs(3e-3, 5000),
                standardize: false,
            },
            nonlinear_ae: AeSettings {
                architecture: AeArchitecture {
                    hidden: vec![200],
                    activation: Activation::LeakyRelu,
                },
                train: TrainConfig {
                    weight_decay: 5e-4,
                    ..TrainConfig::epochs(3e-4, 2000)
                },
                standardize: false,
            },
            ann_pod: ann.clone(),
            ann_linear_ae: ann.clone(),
            ann_nonlinear_ae: ann,
        }
    }

    pub fn ann_for(&self, kind: ReducerKind) -> &AnnConfig {
        match kind {
            ReducerKind::Pod => &self.ann_pod,
            ReducerKind::LinearAe => &self.ann_linear_ae,
            ReducerKind::NonlinearAe => &self.ann_nonlinear_ae,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rbf_epsilon > 0.0 && self.rbf_epsilon.is_finite()) {
            return Err(Error::Config(format!("rbf_epsilon must be positive, got {}", self.rbf_epsilon)));
        }
        for t in [&self.linear_ae.train, &self.nonlinear_ae.train] {
            t.validate()?;
        }
        for a in [&self.ann_pod, &self.ann_linear_ae, &self.ann_nonlinear_ae] {
            a.train.validate()?;
        }
        if !self.linear_ae.architecture.is_linear() {
            return Err(Error::Config("linear_ae must use the identity activation".into()));
        }
        Ok(())
    }
}

impl Default for RomSettings {
    fn default() -> Self {
        Self::case1()
    }
}

/// Fits the compression map of `kind` on the columns of `y`.
pub fn fit_reducer(
    kind: ReducerKind,
    y: &nalgebra::DMatrix<f64>,
    latent_dim: usize,
    settings: &RomSettings,
    seed: u64,
) -> Result<Reducer> {
    let ae = |s: &AeSettings| -> Result<Reducer> {
        let cfg = TrainConfig {
            rng_seed: seed,
            ..s.train.clone()
        };
        let (model, report) = ae_fit(y, latent_dim, &s.architecture, &cfg, s.standardize)?;
        log::debug!("autoencoder trained: {} epochs, loss {:e}", report.epochs, report.final_loss);
        Ok(Reducer::Autoencoder(model))
    };
    match kind {
        ReducerKind::Pod => Ok(Reducer::Pod(pod_fit(y, latent_dim)?)),
        ReducerKind::LinearAe => ae(&settings.linear_ae),
        ReducerKind::NonlinearAe => ae(&settings.nonlinear_ae),
    }
}

/// A fitted reduced order model: `predict(mu) = expand(regress(mu))`.
#[derive(Debug, Clone)]
pub struct Rom {
    pub variant: RomVariant,
    pub reducer: Arc<Reducer>,
    pub regressor: Regressor,
    pub geometry: Arc<PlaneGeometry>,
}

impl Rom {
    pub fn latent_dim(&self) -> usize {
        self.reducer.latent_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.regressor.param_dim()
    }

    pub fn predict_values(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.reducer.expand(&self.regressor.predict(mu)?)
    }

    /// Writes `rom.json`, the reducer and the regressor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = RomMeta {
            variant: self.variant,
            latent_dim: self.latent_dim(),
            param_dim: self.param_dim(),
        };
        write_json(&dir.join("rom.json"), &meta)?;
        match self.reducer.as_ref() {
            Reducer::Pod(b) => b.save(&dir.join("pod"))?,
            Reducer::Autoencoder(a) => write_json(&dir.join("autoencoder.json"), a)?,
        }
        match &self.regressor {
            Regressor::Rbf(m) => write_json(&dir.join("rbf.json"), m),
            Regressor::Ann(m) => write_json(&dir.join("ann.json"), m),
        }
    }

    pub fn load(dir: &Path, geometry: Arc<PlaneGeometry>) -> Result<Self> {
        let meta: RomMeta = read_json(&dir.join("rom.json"))?;
        let reducer = match meta.variant.reducer_kind() {
            ReducerKind::Pod => Reducer::Pod(PodBasis::load(&dir.join("pod"))?),
            _ => Reducer::Autoencoder(read_json::<Autoencoder>(&dir.join("autoencoder.json"))?),
        };
        let regressor = if meta.variant.uses_ann() {
            Regressor::Ann(read_json::<AnnRegressor>(&dir.join("ann.json"))?)
        } else {
            Regressor::Rbf(read_json::<RbfModel>(&dir.join("rbf.json"))?)
        };
        let rom_path = dir.join("rom.json");
        if reducer.latent_dim() != meta.latent_dim || regressor.latent_dim() != meta.latent_dim {
            return Err(Error::malformed(&rom_path, "latent dimension disagrees with stored models"));
        }
        if regressor.param_dim() != meta.param_dim {
            return Err(Error::malformed(&rom_path, "parameter dimension disagrees with stored regressor"));
        }
        let dof = match &reducer {
            Reducer::Pod(b) => b.dof(),
            Reducer::Autoencoder(a) => a.dof(),
        };
        if dof != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "ROM has {dof} degrees of freedom, geometry has {} points",
                geometry.len()
            )));
        }
        Ok(Rom {
            variant: meta.variant,
            reducer: Arc::new(reducer),
            regressor,
            geometry,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RomMeta {
    variant: RomVariant,
    latent_dim: usize,
    param_dim: usize,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::malformed(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))
}

fn annotate(variant: RomVariant, e: Error) -> Error {
    Error::Variant {
        variant: variant.name().to_string(),
        source: Box::new(e),
    }
}

/// Fits reducer and regressor of `variant` on `train`.
pub fn rom_fit(
    variant: RomVariant,
    train: &SnapshotSet,
    latent_dim: usize,
    settings: &RomSettings,
    seed: u64,
) -> Result<Rom> {
    check_train_size(train, latent_dim).map_err(|e| annotate(variant, e))?;
    let reducer = fit_reducer(
        variant.reducer_kind(),
        train.matrix(),
        latent_dim,
        settings,
        derive_seed(seed, &[0]),
    )
    .map_err(|e| annotate(variant, e))?;
    rom_fit_with_reducer(variant, Arc::new(reducer), train, settings, derive_seed(seed, &[1]))
}

fn check_train_size(train: &SnapshotSet, latent_dim: usize) -> Result<()> {
    if train.len() < latent_dim {
        return Err(Error::InvalidArgument(format!(
            "{} training snapshots cannot support latent dimension {latent_dim}",
            train.len()
        )));
    }
    Ok(())
}

/// Fits only the regressor, on latents produced by an already fitted reducer.
pub fn rom_fit_with_reducer(
    variant: RomVariant,
    reducer: Arc<Reducer>,
    train: &SnapshotSet,
    settings: &RomSettings,
    seed: u64,
) -> Result<Rom> {
    let inner = || -> Result<Rom> {
        check_train_size(train, reducer.latent_dim())?;
        let latents = rows_of(&reducer.compress_matrix(train.matrix())?);
        let regressor = if variant.uses_ann() {
            let mut cfg = settings.ann_for(variant.reducer_kind()).clone();
            cfg.train.rng_seed = seed;
            let (model, report) = ann_fit(train.params(), &latents, &cfg)?;
            log::debug!("{variant} regressor: {} epochs, loss {:e}", report.epochs, report.final_loss);
            Regressor::Ann(model)
        } else {
            let model = rbf_fit(train.params(), &latents, settings.rbf_epsilon)?;
            if model.is_regularized() {
                log::warn!("{variant}: RBF system regularized (condition {:e})", model.condition_estimate);
            }
            Regressor::Rbf(model)
        };
        Ok(Rom {
            variant,
            reducer: reducer.clone(),
            regressor,
            geometry: train.geometry().clone(),
        })
    };
    inner().map_err(|e| annotate(variant, e))
}

pub fn rom_predict(rom: &Rom, mu: &[f64]) -> Result<ScalarField> {
    ScalarField::new(rom.geometry.clone(), rom.predict_values(mu)?)
}

/// Mean relative error of `rom` over the snapshots of `set`.
pub fn mean_relative_error(rom: &Rom, set: &SnapshotSet, mask: Option<&[usize]>) -> Result<f64> {
    let mut total = 0.0;
    for (i, mu) in set.params().iter().enumerate() {
        let pred = rom.predict_values(mu)?;
        let truth = set.matrix().column(i);
        total += masked_relative_error(&pred, truth.as_slice(), mask)?;
    }
    Ok(total / set.len() as f64)
}

fn three() -> usize {
    3
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub variants: Vec<RomVariant>,
    pub m_list: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default = "three")]
    pub runs: usize,
    /// Leading snapshots of the pool held out as the fixed test set.
    #[serde(default = "ten")]
    pub test_size: usize,
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.m_list.is_empty() {
            return Err(Error::Config("sensitivity analysis needs variants and an M list".into()));
        }
        if self.runs == 0 || self.test_size == 0 || self.latent_dim == 0 || self.m_list.contains(&0) {
            return Err(Error::Config("runs, test_size, latent_dim and every M must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: RomVariant,
    pub m: usize,
    pub run: usize,
    /// NaN when the cell failed.
    pub train_err: f64,
    pub test_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub variant: RomVariant,
    pub m: usize,
    pub run: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub variant: RomVariant,
    pub m: usize,
    /// Runs that produced finite errors.
    pub runs_ok: usize,
    pub mean_train: f64,
    pub min_train: f64,
    pub max_train: f64,
    pub mean_test: f64,
    pub min_test: f64,
    pub max_test: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    /// Sorted by variant, M, run.
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // keep min <= mean <= max under rounding
    (mean.clamp(min, max), min, max)
}

impl SensitivityReport {
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(RomVariant, usize), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            groups.entry((c.variant, c.m)).or_default().push(c);
        }
        groups
            .into_iter()
            .map(|((variant, m), cells)| {
                let ok: Vec<_> = cells
                    .iter()
                    .filter(|c| c.train_err.is_finite() && c.test_err.is_finite())
                    .collect();
                let train: Vec<f64> = ok.iter().map(|c| c.train_err).collect();
                let test: Vec<f64> = ok.iter().map(|c| c.test_err).collect();
                let (mean_train, min_train, max_train) = stats(&train);
                let (mean_test, min_test, max_test) = stats(&test);
                Aggregate {
                    variant,
                    m,
                    runs_ok: ok.len(),
                    mean_train,
                    min_train,
                    max_train,
                    mean_test,
                    min_test,
                    max_test,
                }
            })
            .collect()
    }

    pub fn aggregate(&self, variant: RomVariant, m: usize) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.variant == variant && a.m == m)
    }

    /// Writes `sensitivity_cells.csv`, `sensitivity_summary.csv`,
    /// `sensitivity_table.csv` (test error min/max per variant, one row per M)
    /// and `sensitivity_failures.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let path = dir.join("sensitivity_cells.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["variant", "M", "run", "train_err", "test_err"])
            .map_err(|e| csv_err(&path, e))?;
        for c in &self.cells {
            w.write_record([
                c.variant.name().to_string(),
                c.m.to_string(),
                c.run.to_string(),
                c.train_err.to_string(),
                c.test_err.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let aggs = self.aggregates();
        let path = dir.join("sensitivity_summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record([
            "variant",
            "M",
            "runs_ok",
            "mean_train",
            "min_train",
            "max_train",
            "mean_test",
            "min_test",
            "max_test",
        ])
        .map_err(|e| csv_err(&path, e))?;
        for a in &aggs {
            w.write_record([
                a.variant.name().to_string(),
                a.m.to_string(),
                a.runs_ok.to_string(),
                a.mean_train.to_string(),
                a.min_train.to_string(),
                a.max_train.to_string(),
                a.mean_test.to_string(),
                a.min_test.to_string(),
                a.max_test.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let mut variants: Vec<RomVariant> = aggs.iter().map(|a| a.variant).collect();
        variants.dedup();
        let mut ms: Vec<usize> = aggs.iter().map(|a| a.m).collect();
        ms.sort_unstable();
        ms.dedup();
        let path = dir.join("sensitivity_table.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["M".to_string()];
        for v in &variants {
            header.push(format!("{v} min"));
            header.push(format!("{v} max"));
        }
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for m in ms {
            let mut row = vec![m.to_string()];
            for v in &variants {
                match aggs.iter().find(|a| a.variant == *v && a.m == m) {
                    Some(a) => {
                        row.push(a.min_test.to_string());
                        row.push(a.max_test.to_string());
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
            }
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("sensitivity_failures.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["variant", "M", "run", "message"]).map_err(|e| csv_err(&path, e))?;
        for f in &self.failures {
            w.write_record([f.variant.name().to_string(), f.m.to_string(), f.run.to_string(), f.message.clone()])
                .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Train/test error sweep over training-set sizes and repeated seeded runs.
///
/// The first `test_size` snapshots of `pool` form the fixed test set; the
/// training set for size `M` is the next `M` snapshots, so training sets are
/// nested. Every `(M, run)` pair fits each needed reducer once and shares it
/// among the variants built on it. Per-cell failures are recorded, not raised.
pub fn sensitivity_analysis(
    pool: &SnapshotSet,
    cfg: &SensitivityConfig,
    settings: &RomSettings,
    rng_seed: u64,
    mask: Option<&[usize]>,
) -> Result<SensitivityReport> {
    cfg.validate()?;
    let max_m = *cfg.m_list.iter().max().unwrap();
    if pool.len() < max_m + cfg.test_size {
        return Err(Error::InvalidArgument(format!(
            "snapshot pool of {} is smaller than max M {max_m} + test size {}",
            pool.len(),
            cfg.test_size
        )));
    }
    let test = pool.subset(&(0..cfg.test_size).collect::<Vec<_>>())?;
    let mut variants = cfg.variants.clone();
    variants.sort();
    variants.dedup();

    let jobs: Vec<(usize, usize)> = cfg
        .m_list
        .iter()
        .flat_map(|&m| (0..cfg.runs).map(move |run| (m, run)))
        .collect();
    let results: Vec<(Vec<CellResult>, Vec<CellFailure>)> = jobs
        .par_iter()
        .map(|&(m, run)| {
            let train = pool.subset(&(cfg.test_size..cfg.test_size + m).collect::<Vec<_>>());
            let mut cells = Vec::new();
            let mut failures = Vec::new();
            let mut reducers: BTreeMap<ReducerKind, std::result::Result<Arc<Reducer>, String>> = BTreeMap::new();
            for &variant in &variants {
                let kind = variant.reducer_kind();
                let outcome = (|| -> Result<(f64, f64)> {
                    let train = train.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    check_train_size(train, cfg.latent_dim)?;
                    let reducer = reducers
                        .entry(kind)
                        .or_insert_with(|| {
                            let seed = derive_seed(rng_seed, &[m as u64, run as u64, kind as u64]);
                            fit_reducer(kind, train.matrix(), cfg.latent_dim, settings, seed)
                                .map(Arc::new)
                                .map_err(|e| e.to_string())
                        })
                        .clone()
                        .map_err(|msg| Error::InvalidArgument(format!("reducer fit failed: {msg}")))?;
                    let seed = derive_seed(rng_seed, &[m as u64, run as u64, 100 + variant.index()]);
                    let rom = rom_fit_with_reducer(variant, reducer, train, settings, seed)?;
                    Ok((mean_relative_error(&rom, train, mask)?, mean_relative_error(&rom, &test, mask)?))
                })();
                match outcome {
                    Ok((train_err, test_err)) => cells.push(CellResult {
                        variant,
                        m,
                        run,
                        train_err,
                        test_err,
                    }),
                    Err(e) => {
                        log::warn!("{variant} M={m} run={run} failed: {e}");
                        cells.push(CellResult {
                            variant,
                            m,
                            run,
                            train_err: f64::NAN,
                            test_err: f64::NAN,
                        });
                        failures.push(CellFailure {
                            variant,
                            m,
                            run,
                            message: e.to_string(),
                        });
                    }
                }
            }
            (cells, failures)
        })
        .collect();

    let mut cells: Vec<CellResult> = results.iter().flat_map(|r| r.0.clone()).collect();
    let mut failures: Vec<CellFailure> = results.into_iter().flat_map(|r| r.1).collect();
    cells.sort_by_key(|c| (c.variant, c.m, c.run));
    failures.sort_by_key(|f| (f.variant, f.m, f.run));
    Ok(SensitivityReport { cells, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fullorder::{SnapshotProvider, SyntheticTransport};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Snapshots of a linear provider applied to inlets spanned by `rank` fixed fields.
    fn linear_pool(m: usize, rank: usize, seed: u64) -> SnapshotSet {
        let geometry = Arc::new(PlaneGeometry::polar_disc(1.0, 4, 8).unwrap());
        let provider = SyntheticTransport::new(geometry.clone(), 0.3, 0.8).unwrap();
        let basis: Vec<ScalarField> = (0..rank)
            .map(|k| {
                ScalarField::from_polar_fn(geometry.clone(), move |r, t| {
                    ((k + 1) as f64 * r).cos() + 0.3 * (k as f64 * t).sin() - if k == 0 { 2.0 } else { 0.0 }
                })
                .unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut wakes = DMatrix::zeros(geometry.len(), m);
        for j in 0..m {
            let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let coeff = [1.0 + mu[0], (2.0 * mu[1]).sin(), mu[0] * mu[2] + 0.5 * mu[1]];
            let values: Vec<f64> = (0..geometry.len())
                .map(|i| (0..rank).map(|k| coeff[k] * basis[k].values()[i]).sum())
                .collect();
            let inlet = ScalarField::new(geometry.clone(), values).unwrap();
            let wake = provider.solve(&inlet).unwrap();
            wakes.set_column(j, &nalgebra::DVector::from_vec(wake.into_values()));
            params.push(mu);
        }
        SnapshotSet::new(params, wakes, geometry).unwrap()
    }

    fn quick_settings() -> RomSettings {
        let mut s = RomSettings::case1();
        s.linear_ae.train = TrainConfig::epochs(1e-2, 300);
        s.nonlinear_ae.architecture.hidden = vec![8];
        s.nonlinear_ae.train = TrainConfig::epochs(1e-3, 100);
        for a in [&mut s.ann_pod, &mut s.ann_linear_ae, &mut s.ann_nonlinear_ae] {
            a.hidden = vec![4, 4];
            a.train = TrainConfig::epochs(5e-3, 300);
        }
        s
    }

    #[test]
    fn names_round_trip() {
        for v in RomVariant::ALL {
            assert_eq!(v.name().parse::<RomVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!(matches!("POD-GPR".parse::<RomVariant>(), Err(Error::Config(_))));
    }

    #[test]
    fn pod_rbf_reproduces_rank_l_training_data() {
        let pool = linear_pool(20, 3, 1);
        let rom = rom_fit(RomVariant::PodRbf, &pool, 3, &RomSettings::case1(), 0).unwrap();
        assert!(mean_relative_error(&rom, &pool, None).unwrap() < 1e-6);
    }

    #[test]
    fn too_few_snapshots() {
        let pool = linear_pool(2, 3, 1);
        for v in RomVariant::ALL {
            let err = rom_fit(v, &pool, 3, &quick_settings(), 0).unwrap_err();
            assert!(matches!(err, Error::Variant { .. }), "{err}");
        }
    }

    #[test]
    fn pod_rbf_at_training_point_is_the_projection() {
        let pool = linear_pool(12, 3, 5);
        let rom = rom_fit(RomVariant::PodRbf, &pool, 2, &RomSettings::case1(), 0).unwrap();
        let Reducer::Pod(basis) = rom.reducer.as_ref() else { unreachable!() };
        for (i, mu) in pool.params().iter().enumerate() {
            let wake = pool.matrix().column(i);
            let proj = basis.expand(&basis.compress(wake.as_slice()).unwrap()).unwrap();
            let pred = rom_predict(&rom, mu).unwrap();
            let err = masked_relative_error(pred.values(), &proj, None).unwrap();
            assert!(err < 1e-8, "{err}");
        }
        let first = rom_predict(&rom, &pool.params()[0]).unwrap();
        assert_eq!(first, rom_predict(&rom, &pool.params()[0]).unwrap());
    }

    #[test]
    fn single_snapshot_rom() {
        let pool = linear_pool(1, 1, 2);
        let rom = rom_fit(RomVariant::PodRbf, &pool, 1, &RomSettings::case1(), 0).unwrap();
        let pred = rom.predict_values(&pool.params()[0]).unwrap();
        let err = masked_relative_error(&pred, pool.matrix().column(0).as_slice(), None).unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn rom_persistence() {
        let pool = linear_pool(10, 3, 3);
        let dir = tempfile::tempdir().unwrap();
        for v in [RomVariant::PodRbf, RomVariant::LinAeAnn] {
            let rom = rom_fit(v, &pool, 3, &quick_settings(), 4).unwrap();
            let sub = dir.path().join(v.name());
            rom.save(&sub).unwrap();
            let back = Rom::load(&sub, pool.geometry().clone()).unwrap();
            let mu = &pool.params()[3];
            assert_eq!(back.predict_values(mu).unwrap(), rom.predict_values(mu).unwrap());
        }
    }

    #[test]
    fn sensitivity_grid() {
        let pool = linear_pool(26, 3, 9);
        let cfg = SensitivityConfig {
            variants: RomVariant::ALL.to_vec(),
            m_list: vec![6, 16],
            latent_dim: 3,
            runs: 2,
            test_size: 10,
        };
        let report = sensitivity_analysis(&pool, &cfg, &quick_settings(), 11, None).unwrap();
        assert_eq!(report.cells.len(), 6 * 2 * 2);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        for a in report.aggregates() {
            assert!(a.min_test <= a.mean_test && a.mean_test <= a.max_test);
            assert!(a.min_train <= a.mean_train && a.mean_train <= a.max_train);
            if a.variant.is_deterministic() {
                assert_eq!(a.min_test, a.max_test);
                assert_eq!(a.min_train, a.max_train);
            }
        }
        let again = sensitivity_analysis(&pool, &cfg, &quick_settings(), 11, None).unwrap();
        assert_eq!(again, report);
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(dir.path()).unwrap();
        let cells = std::fs::read_to_string(dir.path().join("sensitivity_cells.csv")).unwrap();
        assert!(cells.starts_with("variant,M,run,train_err,test_err\n"));
        assert_eq!(cells.lines().count(), 25);
        let table = std::fs::read_to_string(dir.path().join("sensitivity_table.csv")).unwrap();
        assert!(table.starts_with("M,POD-RBF min,POD-RBF max,POD-ANN min"));
    }

    #[test]
    fn failed_cells_are_recorded() {
        let pool = linear_pool(14, 3, 9);
        let cfg = SensitivityConfig {
            variants: vec![RomVariant::PodRbf],
            m_list: vec![2, 4],
            latent_dim: 3,
            runs: 1,
            test_size: 10,
        };
        let report = sensitivity_analysis(&pool, &cfg, &RomSettings::case1(), 0, None).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].m, 2);
        assert!(report.cells[0].test_err.is_nan());
        assert!(report.cells[1].test_err.is_finite());
        let too_big = SensitivityConfig {
            m_list: vec![5],
            ..cfg
        };
        assert!(sensitivity_analysis(&pool, &too_big, &RomSettings::case1(), 0, None).is_err());
    }

    #[test]
    fn masked_errors_use_only_selected_points() {
        let pool = linear_pool(16, 3, 4);
        let rom = rom_fit(RomVariant::PodRbf, &pool, 2, &RomSettings::case1(), 0).unwrap();
        let full = mean_relative_error(&rom, &pool, None).unwrap();
        let all: Vec<usize> = (0..pool.dof()).collect();
        assert_eq!(mean_relative_error(&rom, &pool, Some(&all)).unwrap(), full);
        assert!(mean_relative_error(&rom, &pool, Some(&[0, 1, 2])).unwrap().is_finite());
    }
}
