//! Config-driven orchestration: parametrize, snapshots, rom, optimize.
//!
//! Every stage reads its inputs from, and writes its artifacts to, a common
//! output directory, so stages can be rerun independently. Stage seeds are
//! derived from the top-level `rng_seed`; seeds nested inside training or
//! optimizer settings are ignored.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::boundary::{
    inlet_from_params, network_field, sample_param_vectors, ParamKind, ParamRef, ParamVector,
    PerturbationScheme,
};
use crate::error::{Error, Result};
use crate::field::{
    csv_err, make_observation_grid, read_field_csv, read_observations_csv, relative_error,
    target_pointwise, target_smooth, write_field_csv, write_observations_csv,
    ObservationSet, PlaneGeometry, ScalarField,
};
use crate::fullorder::{generate_snapshots, IdentityProvider, SnapshotProvider, SnapshotSet, SyntheticTransport};
use crate::neuralnet::{train, Activation, ContinuityPenalty, DenseNetwork, Penalty, TrainConfig};
use crate::optimize::{bfgs_minimize, ga_minimize, rom_fitness, BfgsConfig, GaConfig, OptResult, WakeTarget};
use crate::rom::{
    mean_relative_error, read_json, rom_fit, rom_predict, sensitivity_analysis, write_json, Rom,
    RomSettings, RomVariant, SensitivityConfig,
};
use crate::seed::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

const SEED_PARAMETRIZE: u64 = 1;
const SEED_SNAPSHOTS: u64 = 2;
const SEED_SENSITIVITY: u64 = 3;
const SEED_FINAL_ROM: u64 = 4;
const SEED_GA: u64 = 5;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// What the boundary network is trained to reproduce, and what the wake should match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// The radially symmetric ringed field, known at every geometry point.
    Smooth,
    /// Pointwise observations of the analytic test function on a square grid.
    Pointwise { side: f64, n_per_axis: usize },
    /// Observations read from an `x,y,value` CSV.
    Observations { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub radius: f64,
    pub n_radial: usize,
    pub n_angular: usize,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            radius: 1.18,
            n_radial: 100,
            n_angular: 100,
        }
    }
}

impl GeometrySpec {
    pub fn build(&self) -> Result<Arc<PlaneGeometry>> {
        PlaneGeometry::polar_disc(self.radius, self.n_radial, self.n_angular)
            .map(Arc::new)
            .map_err(|e| config_err(format!("geometry: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametrizationSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    /// Radii sampled on `[0, geometry radius]` for the angular seam penalty;
    /// only used when `train.continuity_weight > 0`.
    #[serde(default)]
    pub continuity_points: usize,
    /// Train on z-scored targets, then fold the scaling into the output layer.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeSpec {
    TrailingBiases { layers: usize },
    LastHiddenLayer,
    /// `(layer, kind, index)` triples; weight indices are row-major.
    Explicit { targets: Vec<ParamRef> },
}

impl SchemeSpec {
    pub fn build(&self, net: &DenseNetwork) -> Result<PerturbationScheme> {
        let scheme = match self {
            SchemeSpec::TrailingBiases { layers } => PerturbationScheme::trailing_biases(net, *layers),
            SchemeSpec::LastHiddenLayer => PerturbationScheme::last_hidden_layer(net),
            SchemeSpec::Explicit { targets } => Ok(PerturbationScheme::new(targets.clone())),
        }
        .map_err(|e| config_err(format!("perturbation: {e}")))?;
        if scheme.is_empty() {
            return Err(config_err("perturbation scheme selects no parameters"));
        }
        scheme.validate(net).map_err(|e| config_err(format!("perturbation: {e}")))?;
        Ok(scheme)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSpec {
    pub count: usize,
    /// Make the first sample the unperturbed network (`mu = 0`).
    #[serde(default)]
    pub include_origin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Synthetic {
        blur_radius: f64,
        attenuation: f64,
        #[serde(default)]
        saturation: Option<f64>,
    },
    Identity,
    /// A snapshot directory produced elsewhere (`params.csv`, `wakes.csv`, `meta.json`).
    External { dir: PathBuf },
}

impl ProviderSpec {
    /// `None` for external snapshots, which cannot be solved on demand.
    pub fn build(&self, geometry: Arc<PlaneGeometry>) -> Result<Option<Box<dyn SnapshotProvider>>> {
        Ok(match self {
            ProviderSpec::Synthetic {
                blur_radius,
                attenuation,
                saturation,
            } => {
                let mut op = SyntheticTransport::new(geometry, *blur_radius, *attenuation)
                    .map_err(|e| config_err(format!("provider: {e}")))?;
                if let Some(s) = saturation {
                    op = op.with_saturation(*s).map_err(|e| config_err(format!("provider: {e}")))?;
                }
                Some(Box::new(op))
            }
            ProviderSpec::Identity => Some(Box::new(IdentityProvider::new(geometry))),
            ProviderSpec::External { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    pub variants: Vec<RomVariant>,
    pub m_list: Vec<usize>,
    pub runs: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomSpec {
    pub latent_dim: usize,
    #[serde(default)]
    pub sensitivity: Option<SensitivitySpec>,
    /// Variant of the final model; when absent the best sensitivity variant
    /// at the largest M is used, or POD-RBF without a sensitivity sweep.
    #[serde(default)]
    pub variant: Option<RomVariant>,
    /// Snapshots used for the final model, taken after the sensitivity test
    /// set; all remaining snapshots when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub settings: RomSettings,
}

/// GA settings without bounds and seed, which the pipeline supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaSpec {
    pub pop_init: usize,
    pub mu_select: usize,
    pub lambda_offspring: usize,
    pub generations: usize,
    pub cx_prob: f64,
    pub mut_prob: f64,
    pub mutation_std: f64,
    pub mutation_gene_prob: f64,
    pub blend_alpha: f64,
}

impl Default for GaSpec {
    fn default() -> Self {
        let d = GaConfig::default();
        Self {
            pop_init: d.pop_init,
            mu_select: d.mu_select,
            lambda_offspring: d.lambda_offspring,
            generations: d.generations,
            cx_prob: d.cx_prob,
            mut_prob: d.mut_prob,
            mutation_std: d.mutation_std,
            mutation_gene_prob: d.mutation_gene_prob,
            blend_alpha: d.blend_alpha,
        }
    }
}

impl GaSpec {
    pub fn to_config(&self, bounds: Vec<(f64, f64)>, rng_seed: u64) -> GaConfig {
        GaConfig {
            pop_init: self.pop_init,
            mu_select: self.mu_select,
            lambda_offspring: self.lambda_offspring,
            generations: self.generations,
            cx_prob: self.cx_prob,
            mut_prob: self.mut_prob,
            mutation_std: self.mutation_std,
            mutation_gene_prob: self.mutation_gene_prob,
            blend_alpha: self.blend_alpha,
            bounds,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfgsSpec {
    pub starts: Vec<Vec<f64>>,
    #[serde(default)]
    pub settings: BfgsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WakeTargetSpec {
    /// The case target: the smooth field everywhere, or the observations at their nearest points.
    Target,
    /// The provider's wake for a known parameter vector.
    FromParams { mu: Vec<f64> },
    /// A full wake field in `r,theta,value` CSV form on the snapshot geometry.
    FieldFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSpec {
    pub wake_target: WakeTargetSpec,
    #[serde(default)]
    pub ga: Option<GaSpec>,
    #[serde(default)]
    pub bfgs: Option<BfgsSpec>,
}

/// The whole pipeline in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub rng_seed: u64,
    /// Where artifacts go; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub target: TargetSpec,
    #[serde(default)]
    pub geometry: GeometrySpec,
    pub parametrization: ParametrizationSpec,
    pub perturbation: SchemeSpec,
    pub bounds: (f64, f64),
    pub snapshots: SnapshotSpec,
    pub provider: ProviderSpec,
    pub rom: RomSpec,
    pub optimize: OptimizeSpec,
}

fn explicit(layer: usize, kind: ParamKind, indices: std::ops::Range<usize>) -> Vec<ParamRef> {
    indices.map(|index| ParamRef { layer, kind, index }).collect()
}

impl PipelineConfig {
    /// Smooth ringed target, `[10, 5, 3]` boundary network, 4 bias shifts.
    pub fn case1() -> Self {
        let mut targets = explicit(2, ParamKind::Bias, 0..3);
        targets.extend(explicit(3, ParamKind::Bias, 0..1));
        Self {
            version: SCHEMA_VERSION,
            rng_seed: 0,
            output_dir: None,
            target: TargetSpec::Smooth,
            geometry: GeometrySpec::default(),
            parametrization: ParametrizationSpec {
                hidden: vec![10, 5, 3],
                activation: Activation::Softplus,
                train: TrainConfig {
                    target_loss: Some(1e-4),
                    ..TrainConfig::epochs(1e-2, 10_000)
                },
                continuity_points: 0,
                standardize: true,
            },
            perturbation: SchemeSpec::Explicit { targets },
            bounds: (-0.5, 0.5),
            snapshots: SnapshotSpec {
                count: 100,
                include_origin: false,
            },
            provider: ProviderSpec::Synthetic {
                blur_radius: 0.1,
                attenuation: 0.9,
                saturation: None,
            },
            rom: RomSpec {
                latent_dim: 3,
                sensitivity: Some(SensitivitySpec {
                    variants: RomVariant::ALL.to_vec(),
                    m_list: vec![10, 30, 50, 70, 90],
                    runs: 3,
                    test_size: 10,
                }),
                variant: None,
                train_size: Some(90),
                settings: RomSettings::case1(),
            },
            optimize: OptimizeSpec {
                wake_target: WakeTargetSpec::Target,
                ga: Some(GaSpec::default()),
                bfgs: Some(BfgsSpec {
                    starts: vec![
                        vec![0.5, -0.5, -0.5, 0.5],
                        vec![-0.25, 0.25, 0.0, -0.25],
                        vec![0.0, 0.0, 0.0, 0.0],
                        vec![-0.1, 0.1, -0.1, 0.1],
                        vec![0.1, 0.1, 0.1, 0.1],
                    ],
                    settings: BfgsConfig {
                        fd_step: 1e-17,
                        ..BfgsConfig::default()
                    },
                }),
            },
        }
    }

    /// 36 pointwise observations, `[8, 2, 2]` network with seam penalty,
    /// the 6 weights and biases of the last hidden layer perturbed.
    pub fn case2() -> Self {
        let mut targets = explicit(2, ParamKind::Weight, 0..4);
        targets.extend(explicit(2, ParamKind::Bias, 0..2));
        Self {
            version: SCHEMA_VERSION,
            rng_seed: 0,
            output_dir: None,
            target: TargetSpec::Pointwise {
                side: 1.0,
                n_per_axis: 6,
            },
            geometry: GeometrySpec::default(),
            parametrization: ParametrizationSpec {
                hidden: vec![8, 2, 2],
                activation: Activation::Softplus,
                train: TrainConfig {
                    continuity_weight: 1.0,
                    ..TrainConfig::epochs(3e-3, 50_000)
                },
                continuity_points: 100,
                standardize: true,
            },
            perturbation: SchemeSpec::Explicit { targets },
            bounds: (-1.0, 1.0),
            snapshots: SnapshotSpec {
                count: 100,
                include_origin: false,
            },
            provider: ProviderSpec::Synthetic {
                blur_radius: 0.1,
                attenuation: 0.9,
                saturation: None,
            },
            rom: RomSpec {
                latent_dim: 4,
                sensitivity: Some(SensitivitySpec {
                    variants: RomVariant::ALL.to_vec(),
                    m_list: vec![10, 30, 50, 70, 90],
                    runs: 3,
                    test_size: 10,
                }),
                variant: None,
                train_size: Some(90),
                settings: RomSettings::case2(),
            },
            optimize: OptimizeSpec {
                wake_target: WakeTargetSpec::Target,
                ga: Some(GaSpec::default()),
                bfgs: Some(BfgsSpec {
                    starts: vec![
                        vec![0.0; 6],
                        vec![0.5, -0.5, 0.5, -0.5, 0.5, -0.5],
                        vec![-0.5, 0.5, -0.5, 0.5, -0.5, 0.5],
                        vec![0.25, 0.25, -0.25, -0.25, 0.25, 0.25],
                        vec![-0.75, 0.0, 0.75, 0.0, -0.75, 0.0],
                    ],
                    settings: BfgsConfig {
                        fd_step: 1e-17,
                        ..BfgsConfig::default()
                    },
                }),
            },
        }
    }

    /// Desk-sized smooth case: small geometry, short training, recovers a known `mu`.
    pub fn quick() -> Self {
        let mut cfg = Self::case1();
        cfg.geometry = GeometrySpec {
            radius: 1.18,
            n_radial: 10,
            n_angular: 16,
        };
        cfg.parametrization.train = TrainConfig {
            target_loss: Some(1e-4),
            ..TrainConfig::epochs(1e-2, 3000)
        };
        cfg.snapshots.count = 30;
        cfg.provider = ProviderSpec::Synthetic {
            blur_radius: 0.2,
            attenuation: 0.9,
            saturation: None,
        };
        cfg.rom.sensitivity = Some(SensitivitySpec {
            variants: vec![RomVariant::PodRbf, RomVariant::PodAnn],
            m_list: vec![10, 20],
            runs: 2,
            test_size: 5,
        });
        cfg.rom.train_size = None;
        cfg.rom.variant = Some(RomVariant::PodRbf);
        cfg.rom.settings.ann_pod.train.max_epochs = Some(5000);
        cfg.optimize = OptimizeSpec {
            wake_target: WakeTargetSpec::FromParams {
                mu: vec![0.2, -0.1, 0.3, -0.2],
            },
            ga: Some(GaSpec {
                pop_init: 40,
                mu_select: 20,
                lambda_offspring: 40,
                generations: 10,
                ..GaSpec::default()
            }),
            bfgs: Some(BfgsSpec {
                starts: vec![vec![0.0; 4]],
                settings: BfgsConfig::default(),
            }),
        };
        cfg
    }

    /// Reads a config file and resolves relative input paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TargetSpec::Observations { path } = &mut self.target {
            fix(path);
        }
        if let ProviderSpec::External { dir } = &mut self.provider {
            fix(dir);
        }
        if let WakeTargetSpec::FieldFile { path } = &mut self.optimize.wake_target {
            fix(path);
        }
    }

    /// The untrained boundary network fixes the layer layout the scheme refers to.
    fn template_network(&self) -> Result<DenseNetwork> {
        DenseNetwork::mlp(
            2,
            &self.parametrization.hidden,
            1,
            self.parametrization.activation,
            Activation::Identity,
            0,
        )
        .map_err(|e| config_err(format!("parametrization network: {e}")))
    }

    /// Number of problem parameters.
    pub fn param_dim(&self) -> Result<usize> {
        Ok(self.perturbation.build(&self.template_network()?)?.len())
    }

    /// Checks everything that can be checked before computing.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported config version {}; expected {SCHEMA_VERSION}",
                self.version
            )));
        }
        self.geometry.build()?;
        match &self.target {
            TargetSpec::Smooth => {}
            TargetSpec::Pointwise { side, n_per_axis } => {
                if !(*side > 0.0 && side.is_finite()) || *n_per_axis < 2 {
                    return Err(config_err("pointwise target needs side > 0 and n_per_axis >= 2"));
                }
            }
            TargetSpec::Observations { path } => {
                if !path.is_file() {
                    return Err(config_err(format!("observation file {} not found", path.display())));
                }
            }
        }
        let par = &self.parametrization;
        if par.hidden.is_empty() || par.hidden.contains(&0) {
            return Err(config_err("parametrization needs non-empty hidden layers"));
        }
        par.train.validate()?;
        if par.train.continuity_weight > 0.0 && par.continuity_points == 0 {
            return Err(config_err("continuity_weight > 0 needs continuity_points > 0"));
        }
        let p = self.param_dim()?;
        let (lo, hi) = self.bounds;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(config_err(format!("bounds [{lo}, {hi}] must be finite with lo < hi")));
        }
        if self.snapshots.count == 0 {
            return Err(config_err("snapshots.count must be positive"));
        }
        match &self.provider {
            ProviderSpec::External { dir } => {
                if !dir.is_dir() {
                    return Err(config_err(format!("snapshot directory {} not found", dir.display())));
                }
            }
            other => {
                let tiny = Arc::new(PlaneGeometry::polar_disc(1.0, 1, 1)?);
                other.build(tiny)?;
            }
        }
        self.validate_rom()?;
        self.validate_optimize(p)
    }

    fn validate_rom(&self) -> Result<()> {
        let rom = &self.rom;
        if rom.latent_dim == 0 {
            return Err(config_err("rom.latent_dim must be positive"));
        }
        rom.settings.validate()?;
        let count = self.snapshots.count;
        let skip = self.sensitivity_config().map_or(0, |s| s.test_size);
        if let Some(s) = self.sensitivity_config() {
            s.validate()?;
            let max_m = *s.m_list.iter().max().unwrap();
            if max_m + s.test_size > count {
                return Err(config_err(format!(
                    "sensitivity needs {} snapshots (max M {max_m} + test {}) but only {count} are generated",
                    max_m + s.test_size,
                    s.test_size
                )));
            }
        }
        let train = rom.train_size.unwrap_or(count.saturating_sub(skip));
        if train < rom.latent_dim || skip + train > count {
            return Err(config_err(format!(
                "final ROM needs between {} and {} training snapshots, got {train}",
                rom.latent_dim,
                count.saturating_sub(skip)
            )));
        }
        Ok(())
    }

    fn validate_optimize(&self, p: usize) -> Result<()> {
        let opt = &self.optimize;
        if opt.ga.is_none() && opt.bfgs.is_none() {
            return Err(config_err("optimize needs a ga or bfgs section"));
        }
        let (lo, hi) = self.bounds;
        let in_box = |v: &[f64]| v.len() == p && v.iter().all(|x| (lo..=hi).contains(x));
        match &opt.wake_target {
            WakeTargetSpec::Target => {}
            WakeTargetSpec::FromParams { mu } => {
                if !in_box(mu) {
                    return Err(config_err(format!(
                        "wake_target mu must have {p} entries within [{lo}, {hi}]"
                    )));
                }
                if matches!(self.provider, ProviderSpec::External { .. }) {
                    return Err(config_err("wake_target from_params needs a provider that can solve"));
                }
            }
            WakeTargetSpec::FieldFile { path } => {
                if !path.is_file() {
                    return Err(config_err(format!("wake field {} not found", path.display())));
                }
            }
        }
        if let Some(ga) = &opt.ga {
            ga.to_config(vec![self.bounds; p], 0).validate()?;
        }
        if let Some(b) = &opt.bfgs {
            b.settings.validate()?;
            if b.starts.is_empty() {
                return Err(config_err("bfgs.starts is empty"));
            }
            if let Some(bad) = b.starts.iter().find(|s| s.len() != p) {
                return Err(config_err(format!("bfgs start {bad:?} must have {p} entries")));
            }
        }
        Ok(())
    }

    pub fn sensitivity_config(&self) -> Option<SensitivityConfig> {
        self.rom.sensitivity.as_ref().map(|s| SensitivityConfig {
            variants: s.variants.clone(),
            m_list: s.m_list.clone(),
            latent_dim: self.rom.latent_dim,
            runs: s.runs,
            test_size: s.test_size,
        })
    }
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn parametrization(&self) -> PathBuf {
        self.root.join("parametrization")
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }

    pub fn rom(&self) -> PathBuf {
        self.root.join("rom")
    }

    pub fn rom_model(&self, variant: RomVariant) -> PathBuf {
        self.rom().join(variant.name())
    }

    pub fn optimize(&self) -> PathBuf {
        self.root.join("optimize")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config_copy(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    ensure_dir(&layout.root)?;
    let mut copy = cfg.clone();
    copy.output_dir = None;
    let path = layout.root.join("config.json");
    std::fs::write(&path, copy.to_json()).map_err(|e| Error::io(&path, e))
}

/// The case target as seen by the boundary network and by the fitness.
enum CaseTarget {
    Field(ScalarField),
    Observations(ObservationSet),
}

fn case_target(cfg: &PipelineConfig, geometry: &Arc<PlaneGeometry>) -> Result<CaseTarget> {
    Ok(match &cfg.target {
        TargetSpec::Smooth => CaseTarget::Field(ScalarField::from_polar_fn(geometry.clone(), |r, _| {
            target_smooth(r)
        })?),
        TargetSpec::Pointwise { side, n_per_axis } => {
            CaseTarget::Observations(make_observation_grid(*side, *n_per_axis, target_pointwise)?)
        }
        TargetSpec::Observations { path } => CaseTarget::Observations(read_observations_csv(path)?),
    })
}

/// Geometry indices the errors are restricted to, for observation targets.
fn observation_mask(cfg: &PipelineConfig, geometry: &Arc<PlaneGeometry>) -> Result<Option<Vec<usize>>> {
    match case_target(cfg, geometry)? {
        CaseTarget::Field(_) => Ok(None),
        CaseTarget::Observations(obs) => Ok(WakeTarget::from_observations(geometry, &obs)?.indices),
    }
}

/// `final_loss`, `final_weight_decay` and `final_penalty` are on the training
/// scale; `final_mse` and `fit_relative_error` are in target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametrizeReport {
    pub training_points: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_mse: f64,
    pub final_weight_decay: f64,
    pub final_penalty: f64,
    /// `|N(x) - target| / |target|` over the training points.
    pub fit_relative_error: f64,
    pub param_dim: usize,
}

/// Trains the boundary network on the case target.
///
/// Writes `network.json`, `scheme.json`, `loss.csv`, `report.json`, the
/// training data and the unperturbed inlet `base_inlet.csv`.
pub fn run_parametrize(cfg: &PipelineConfig, out: &Path) -> Result<ParametrizeReport> {
    cfg.validate()?;
    let layout = Layout::new(out);
    write_config_copy(cfg, &layout)?;
    let dir = layout.parametrization();
    ensure_dir(&dir)?;
    let geometry = cfg.geometry.build()?;

    let (inputs, targets) = match case_target(cfg, &geometry)? {
        CaseTarget::Field(field) => {
            write_field_csv(&dir.join("target.csv"), &field)?;
            let pts = geometry.polar();
            (pts.to_vec(), field.into_values())
        }
        CaseTarget::Observations(obs) => {
            write_observations_csv(&dir.join("observations.csv"), &obs)?;
            (obs.polar_locations(), obs.values())
        }
    };
    let n = inputs.len();
    let x = DMatrix::from_fn(2, n, |i, k| if i == 0 { inputs[k].0 } else { inputs[k].1 });
    let (shift, scale) = if cfg.parametrization.standardize {
        let mean = targets.iter().sum::<f64>() / n as f64;
        let sd = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        (mean, if sd > 0.0 { sd } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let y = DMatrix::from_fn(1, n, |_, k| (targets[k] - shift) / scale);

    let par = &cfg.parametrization;
    let seed = derive_seed(cfg.rng_seed, &[SEED_PARAMETRIZE]);
    let init = DenseNetwork::mlp(2, &par.hidden, 1, par.activation, Activation::Identity, seed)?;
    let train_cfg = TrainConfig {
        rng_seed: seed,
        ..par.train.clone()
    };
    let penalty = ContinuityPenalty::equispaced(cfg.geometry.radius, par.continuity_points);
    let extra: Option<&dyn Penalty> = (train_cfg.continuity_weight > 0.0).then_some(&penalty as &dyn Penalty);
    let (mut net, loss) = train(&init, &x, &y, &train_cfg, extra)?;
    // the output layer is linear, so un-scaling is exact
    if let Some(last) = net.layers_mut().last_mut() {
        last.weights *= scale;
        last.bias = last.bias.map(|b| b * scale + shift);
    }
    let scheme = cfg.perturbation.build(&net)?;

    let fitted = net.forward_batch(&x)?;
    let mse = fitted.iter().zip(&targets).map(|(f, t)| (f - t).powi(2)).sum::<f64>() / n as f64;
    let report = ParametrizeReport {
        training_points: n,
        epochs: loss.epochs,
        final_loss: loss.final_loss,
        final_mse: mse,
        final_weight_decay: loss.final_weight_decay,
        final_penalty: loss.final_penalty,
        fit_relative_error: relative_error(fitted.as_slice(), &targets)?,
        param_dim: scheme.len(),
    };
    log::info!(
        "boundary network: {} epochs, mse {:e}, relative fit error {:.4}",
        report.epochs,
        report.final_mse,
        report.fit_relative_error
    );
    if extra.is_some() {
        log::info!("continuity penalty {:e}", report.final_penalty);
    }

    write_json(&dir.join("network.json"), &net)?;
    write_json(&dir.join("scheme.json"), &scheme)?;
    write_json(&dir.join("report.json"), &report)?;
    write_loss_csv(&dir.join("loss.csv"), &loss.history)?;
    write_field_csv(&dir.join("base_inlet.csv"), &network_field(&net, &geometry)?)?;
    Ok(report)
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "loss"]).map_err(|e| csv_err(path, e))?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_parametrization(layout: &Layout) -> Result<(DenseNetwork, PerturbationScheme)> {
    let dir = layout.parametrization();
    let net: DenseNetwork = read_json(&dir.join("network.json"))?;
    let scheme: PerturbationScheme = read_json(&dir.join("scheme.json"))?;
    scheme.validate(&net)?;
    Ok((net, scheme))
}

/// Samples parameters, solves the provider for each and stores the snapshot set.
pub fn run_snapshots(cfg: &PipelineConfig, out: &Path) -> Result<SnapshotSet> {
    cfg.validate()?;
    let layout = Layout::new(out);
    write_config_copy(cfg, &layout)?;
    let (net, scheme) = load_parametrization(&layout)?;
    let dir = layout.snapshots();

    if let ProviderSpec::External { dir: src } = &cfg.provider {
        let set = SnapshotSet::load(src)?;
        if set.param_dim() != scheme.len() {
            return Err(config_err(format!(
                "external snapshots have {} parameters, the perturbation scheme {}",
                set.param_dim(),
                scheme.len()
            )));
        }
        set.save(&dir, &format!("external ({})", src.display()), None)?;
        log::info!("copied {} external snapshots", set.len());
        return Ok(set);
    }

    let geometry = cfg.geometry.build()?;
    let provider = cfg.provider.build(geometry)?.expect("solving provider");
    let seed = derive_seed(cfg.rng_seed, &[SEED_SNAPSHOTS]);
    let p = scheme.len();
    let count = cfg.snapshots.count;
    let mut mu_list = Vec::with_capacity(count);
    if cfg.snapshots.include_origin {
        mu_list.push(ParamVector::new(vec![0.0; p], vec![cfg.bounds; p])?);
    }
    let random = count - mu_list.len();
    if random > 0 {
        mu_list.extend(sample_param_vectors(p, random, cfg.bounds, seed)?);
    }
    let set = generate_snapshots(&net, &scheme, &mu_list, provider.as_ref())?;
    set.save(&dir, &provider.describe(), Some(seed))?;
    log::info!("generated {} snapshots with {}", set.len(), provider.describe());
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomSelection {
    pub variant: RomVariant,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomFitReport {
    pub variant: RomVariant,
    pub latent_dim: usize,
    pub train_size: usize,
    pub train_error: f64,
    /// Mean error over the held-out sensitivity test snapshots, when there are any.
    pub test_error: Option<f64>,
}

/// Outcome of the ROM stage.
#[derive(Debug, Clone)]
pub struct RomStage {
    pub report: Option<crate::rom::SensitivityReport>,
    pub selection: RomSelection,
    pub fit: RomFitReport,
}

fn select_variant(
    cfg: &PipelineConfig,
    report: Option<&crate::rom::SensitivityReport>,
    override_variant: Option<RomVariant>,
) -> RomSelection {
    if let Some(variant) = override_variant {
        return RomSelection {
            variant,
            reason: "requested on the command line".into(),
        };
    }
    if let Some(variant) = cfg.rom.variant {
        return RomSelection {
            variant,
            reason: "configured".into(),
        };
    }
    if let (Some(report), Some(s)) = (report, cfg.sensitivity_config()) {
        let max_m = *s.m_list.iter().max().unwrap();
        let best = report
            .aggregates()
            .into_iter()
            .filter(|a| a.m == max_m && a.runs_ok > 0 && a.mean_test.is_finite())
            .fold(None::<crate::rom::Aggregate>, |best, a| match best {
                Some(b) if b.mean_test <= a.mean_test => Some(b),
                _ => Some(a),
            });
        if let Some(a) = best {
            return RomSelection {
                variant: a.variant,
                reason: format!("lowest mean test error {:e} at M = {max_m}", a.mean_test),
            };
        }
    }
    RomSelection {
        variant: RomVariant::PodRbf,
        reason: "default".into(),
    }
}

/// Fits and saves the final model of `variant` on the configured training snapshots.
fn fit_final_rom(
    cfg: &PipelineConfig,
    layout: &Layout,
    set: &SnapshotSet,
    variant: RomVariant,
    mask: Option<&[usize]>,
) -> Result<(Rom, RomFitReport)> {
    let skip = cfg.sensitivity_config().map_or(0, |s| s.test_size);
    let train_size = cfg.rom.train_size.unwrap_or(set.len().saturating_sub(skip));
    if skip + train_size > set.len() {
        return Err(config_err(format!(
            "final ROM needs {} snapshots, found {}",
            skip + train_size,
            set.len()
        )));
    }
    let train_idx: Vec<usize> = (skip..skip + train_size).collect();
    let train_set = set.subset(&train_idx)?;
    let seed = derive_seed(cfg.rng_seed, &[SEED_FINAL_ROM, variant.index()]);
    let rom = rom_fit(variant, &train_set, cfg.rom.latent_dim, &cfg.rom.settings, seed)?;
    let train_error = mean_relative_error(&rom, &train_set, mask)?;
    let test_error = if skip > 0 {
        let test_idx: Vec<usize> = (0..skip).collect();
        Some(mean_relative_error(&rom, &set.subset(&test_idx)?, mask)?)
    } else {
        None
    };
    let fit = RomFitReport {
        variant,
        latent_dim: cfg.rom.latent_dim,
        train_size,
        train_error,
        test_error,
    };
    let dir = layout.rom_model(variant);
    ensure_dir(&dir)?;
    rom.save(&dir)?;
    write_json(&dir.join("fit.json"), &fit)?;
    log::info!("{variant}: train error {train_error:e}, test error {test_error:?}");
    Ok((rom, fit))
}

/// Runs the sensitivity sweep (when configured) and fits the final model.
pub fn run_rom(cfg: &PipelineConfig, out: &Path, variant: Option<RomVariant>) -> Result<RomStage> {
    cfg.validate()?;
    let layout = Layout::new(out);
    write_config_copy(cfg, &layout)?;
    let set = SnapshotSet::load(&layout.snapshots())?;
    let mask = observation_mask(cfg, set.geometry())?;
    let dir = layout.rom();
    ensure_dir(&dir)?;

    let report = match cfg.sensitivity_config() {
        Some(s) => {
            let seed = derive_seed(cfg.rng_seed, &[SEED_SENSITIVITY]);
            let report = sensitivity_analysis(&set, &s, &cfg.rom.settings, seed, mask.as_deref())?;
            report.write_csv(&dir)?;
            for f in &report.failures {
                log::warn!("{} M={} run {}: {}", f.variant, f.m, f.run, f.message);
            }
            Some(report)
        }
        None => None,
    };
    let selection = select_variant(cfg, report.as_ref(), variant);
    log::info!("selected {} ({})", selection.variant, selection.reason);
    let (_, fit) = fit_final_rom(cfg, &layout, &set, selection.variant, mask.as_deref())?;
    write_json(&dir.join("selected.json"), &selection)?;
    Ok(RomStage {
        report,
        selection,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub variant: RomVariant,
    pub best_algorithm: String,
    pub best_mu: Vec<f64>,
    /// ROM wake error against the target at `best_mu`.
    pub best_fitness: f64,
    /// Full-order wake error at `best_mu`, when the provider can solve.
    pub full_order_fitness: Option<f64>,
    /// The parameters that produced the target, when known.
    pub true_mu: Option<Vec<f64>>,
    pub ga: Option<OptResult>,
    pub bfgs: Vec<OptResult>,
}

fn build_wake_target(
    cfg: &PipelineConfig,
    geometry: &Arc<PlaneGeometry>,
    provider: Option<&dyn SnapshotProvider>,
    net: &DenseNetwork,
    scheme: &PerturbationScheme,
    dir: &Path,
) -> Result<WakeTarget> {
    match &cfg.optimize.wake_target {
        WakeTargetSpec::Target => match case_target(cfg, geometry)? {
            CaseTarget::Field(field) => {
                write_field_csv(&dir.join("target_wake.csv"), &field)?;
                Ok(WakeTarget::full(&field))
            }
            CaseTarget::Observations(obs) => {
                write_observations_csv(&dir.join("target_observations.csv"), &obs)?;
                WakeTarget::from_observations(geometry, &obs)
            }
        },
        WakeTargetSpec::FromParams { mu } => {
            let provider = provider.ok_or_else(|| config_err("wake target from_params needs a solving provider"))?;
            let inlet = inlet_from_params(net, scheme, &ParamVector::unbounded(mu.clone()), geometry)?;
            let wake = provider.solve(&inlet)?;
            write_field_csv(&dir.join("target_wake.csv"), &wake)?;
            Ok(WakeTarget::full(&wake))
        }
        WakeTargetSpec::FieldFile { path } => {
            let field = read_field_csv(path)?;
            if field.geometry().len() != geometry.len() {
                return Err(Error::GeometryMismatch(format!(
                    "wake field has {} points, snapshots {}",
                    field.geometry().len(),
                    geometry.len()
                )));
            }
            write_field_csv(&dir.join("target_wake.csv"), &field)?;
            Ok(WakeTarget::full(&field))
        }
    }
}

/// Searches the parameter box for the inlet whose ROM wake best matches the target.
pub fn run_optimize(cfg: &PipelineConfig, out: &Path, variant: Option<RomVariant>) -> Result<OptimizeSummary> {
    cfg.validate()?;
    let layout = Layout::new(out);
    write_config_copy(cfg, &layout)?;
    let (net, scheme) = load_parametrization(&layout)?;
    let set = SnapshotSet::load(&layout.snapshots())?;
    let geometry = set.geometry().clone();

    let variant = match variant {
        Some(v) => v,
        None => read_json::<RomSelection>(&layout.rom().join("selected.json"))?.variant,
    };
    let model_dir = layout.rom_model(variant);
    let rom = if model_dir.join("rom.json").is_file() {
        Rom::load(&model_dir, geometry.clone())?
    } else {
        log::info!("no saved {variant} model; fitting one");
        let mask = observation_mask(cfg, &geometry)?;
        fit_final_rom(cfg, &layout, &set, variant, mask.as_deref())?.0
    };
    if rom.param_dim() != scheme.len() {
        return Err(Error::Dimension {
            context: "ROM parameter count vs perturbation scheme",
            expected: scheme.len(),
            actual: rom.param_dim(),
        });
    }
    let rom = Arc::new(rom);

    let dir = layout.optimize();
    ensure_dir(&dir)?;
    let provider = cfg.provider.build(geometry.clone())?;
    let target = build_wake_target(cfg, &geometry, provider.as_deref(), &net, &scheme, &dir)?;
    let fitness = rom_fitness(rom.clone(), target.clone());
    let p = scheme.len();

    let ga = match &cfg.optimize.ga {
        Some(spec) => {
            let ga_cfg = spec.to_config(vec![cfg.bounds; p], derive_seed(cfg.rng_seed, &[SEED_GA]));
            let res = ga_minimize(&fitness, &ga_cfg)?;
            log::info!("GA: fitness {:.6} after {} evaluations", res.best_fitness, res.evaluations);
            res.write_json(&dir.join("ga_result.json"))?;
            res.write_trace_csv(&dir.join("ga_trace.csv"))?;
            Some(res)
        }
        None => None,
    };
    let mut bfgs = Vec::new();
    if let Some(spec) = &cfg.optimize.bfgs {
        for (i, start) in spec.starts.iter().enumerate() {
            let res = bfgs_minimize(&fitness, start, &spec.settings)?;
            log::info!(
                "BFGS start {i}: fitness {:.6}, {} function / {} gradient evaluations, {:?}",
                res.best_fitness,
                res.evaluations,
                res.gradient_evaluations,
                res.termination
            );
            res.write_trace_csv(&dir.join(format!("bfgs_{i}_trace.csv")))?;
            bfgs.push(res);
        }
        write_json(&dir.join("bfgs_results.json"), &bfgs)?;
    }

    let best = ga
        .iter()
        .chain(&bfgs)
        .fold(None::<&OptResult>, |best, r| match best {
            Some(b) if b.best_fitness <= r.best_fitness => Some(b),
            _ => Some(r),
        })
        .expect("validated: at least one optimizer");
    let best_mu = ParamVector::unbounded(best.best_mu.clone());
    let inlet = inlet_from_params(&net, &scheme, &best_mu, &geometry)?;
    write_field_csv(&dir.join("optimal_inlet.csv"), &inlet)?;
    write_field_csv(&dir.join("predicted_wake.csv"), &rom_predict(&rom, &best.best_mu)?)?;
    let full_order_fitness = match &provider {
        Some(provider) => {
            let solved = provider.solve(&inlet)?;
            write_field_csv(&dir.join("solved_wake.csv"), &solved)?;
            Some(target.relative_error(solved.values())?)
        }
        None => None,
    };
    let true_mu = match &cfg.optimize.wake_target {
        WakeTargetSpec::FromParams { mu } => Some(mu.clone()),
        _ => None,
    };
    let summary = OptimizeSummary {
        variant,
        best_algorithm: format!("{:?}", best.algorithm).to_lowercase(),
        best_mu: best.best_mu.clone(),
        best_fitness: best.best_fitness,
        full_order_fitness,
        true_mu,
        ga,
        bfgs,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// All four stages in order.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, variant: Option<RomVariant>) -> Result<OptimizeSummary> {
    run_parametrize(cfg, out)?;
    run_snapshots(cfg, out)?;
    run_rom(cfg, out, variant)?;
    run_optimize(cfg, out, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
    }

    #[test]
    fn shipped_configs_match_embedded_defaults() {
        for (name, cfg) in [
            ("case1.json", PipelineConfig::case1()),
            ("case2.json", PipelineConfig::case2()),
            ("quick.json", PipelineConfig::quick()),
        ] {
            let loaded = PipelineConfig::load(&shipped(name)).unwrap();
            assert_eq!(loaded, cfg, "{name}");
            loaded.validate().unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = PipelineConfig::case2();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn case_parameter_counts() {
        assert_eq!(PipelineConfig::case1().param_dim().unwrap(), 4);
        assert_eq!(PipelineConfig::case2().param_dim().unwrap(), 6);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cases: Vec<PipelineConfig> = Vec::new();
        let mut c = PipelineConfig::quick();
        c.version = 2;
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.bounds = (0.5, -0.5);
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.snapshots.count = 10;
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.target = TargetSpec::Observations {
            path: "/nonexistent/obs.csv".into(),
        };
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.perturbation = SchemeSpec::Explicit {
            targets: vec![ParamRef {
                layer: 9,
                kind: ParamKind::Bias,
                index: 0,
            }],
        };
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.optimize.wake_target = WakeTargetSpec::FromParams { mu: vec![0.0; 3] };
        cases.push(c);
        let mut c = PipelineConfig::quick();
        c.optimize.ga = None;
        c.optimize.bfgs = None;
        cases.push(c);
        for (i, c) in cases.iter().enumerate() {
            let err = c.validate().unwrap_err();
            assert!(err.is_config(), "case {i}: {err}");
        }
        assert!(PipelineConfig::from_json("{\"version\": 1}").unwrap_err().is_config());
        assert!(PipelineConfig::from_json(&PipelineConfig::quick().to_json().replace("\"version\"", "\"verzion\""))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn quick_pipeline_runs_and_reruns_identically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::quick();
        let summary = run_pipeline(&cfg, a.path(), None).unwrap();
        assert!(summary.best_fitness.is_finite());
        let ga = summary.ga.as_ref().unwrap();
        assert!(ga.best_fitness <= ga.trace[0]);
        run_pipeline(&cfg, b.path(), None).unwrap();
        for rel in [
            "parametrization/network.json",
            "snapshots/wakes.csv",
            "rom/sensitivity_cells.csv",
            "optimize/summary.json",
            "optimize/optimal_inlet.csv",
        ] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert!(x == y, "{rel} differs");
        }
    }

    #[test]
    fn origin_snapshot_is_the_base_wake() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::quick();
        cfg.parametrization.train.max_epochs = Some(50);
        cfg.snapshots = SnapshotSpec {
            count: 1,
            include_origin: true,
        };
        cfg.provider = ProviderSpec::Identity;
        cfg.rom.sensitivity = None;
        cfg.rom.latent_dim = 1;
        run_parametrize(&cfg, dir.path()).unwrap();
        let set = run_snapshots(&cfg, dir.path()).unwrap();
        assert_eq!(set.params(), &[vec![0.0; 4]]);
        let base = read_field_csv(&dir.path().join("parametrization/base_inlet.csv")).unwrap();
        assert_eq!(set.matrix().column(0).as_slice(), base.values());
    }

    #[test]
    fn stage_without_its_inputs_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_snapshots(&PipelineConfig::quick(), dir.path()).unwrap_err();
        assert!(err.is_config(), "{err}");
    }
}
