//! Parameter recovery: (mu + lambda) genetic algorithm and forward-difference BFGS.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{csv_err, ObservationSet, PlaneGeometry, ScalarField};
use crate::rom::Rom;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub pop_init: usize,
    pub mu_select: usize,
    pub lambda_offspring: usize,
    pub generations: usize,
    pub cx_prob: f64,
    pub mut_prob: f64,
    pub mutation_std: f64,
    /// Probability that each gene of a mutated individual is perturbed.
    pub mutation_gene_prob: f64,
    pub blend_alpha: f64,
    pub bounds: Vec<(f64, f64)>,
    pub rng_seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            pop_init: 200,
            mu_select: 50,
            lambda_offspring: 100,
            generations: 20,
            cx_prob: 0.4,
            mut_prob: 0.6,
            mutation_std: 1.0,
            mutation_gene_prob: 0.5,
            blend_alpha: 0.5,
            bounds: vec![],
            rng_seed: 0,
        }
    }
}

impl GaConfig {
    pub fn with_bounds(bounds: Vec<(f64, f64)>, rng_seed: u64) -> Self {
        Self {
            bounds,
            rng_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !prob(self.cx_prob) || !prob(self.mut_prob) || !prob(self.mutation_gene_prob) {
            return Err(Error::Config("GA probabilities must lie in [0, 1]".into()));
        }
        if self.cx_prob + self.mut_prob > 1.0 + 1e-12 {
            return Err(Error::Config("cx_prob + mut_prob must not exceed 1".into()));
        }
        if self.pop_init == 0 || self.mu_select == 0 || self.lambda_offspring == 0 {
            return Err(Error::Config("GA population sizes must be positive".into()));
        }
        if !(self.mutation_std >= 0.0) || !(self.blend_alpha >= 0.0) {
            return Err(Error::Config("mutation_std and blend_alpha must be >= 0".into()));
        }
        if self.bounds.is_empty() {
            return Err(Error::Config("GA needs per-gene bounds".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("degenerate GA bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Genetic,
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Fixed generation budget spent.
    Generations,
    GradientTolerance,
    /// Every forward difference came out exactly zero.
    VanishingGradient,
    LineSearchFailure,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub algorithm: Algorithm,
    pub best_mu: Vec<f64>,
    pub best_fitness: f64,
    /// GA: best-so-far fitness after each generation (entry 0 is the initial
    /// population). BFGS: fitness after each iteration (entry 0 is the start).
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub gradient_evaluations: usize,
    pub termination: Termination,
}

impl OptResult {
    /// BFGS ended without the gradient or line search carrying it anywhere useful.
    pub fn stalled(&self) -> bool {
        matches!(self.termination, Termination::VanishingGradient | Termination::LineSearchFailure)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::malformed(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per trace entry: `step,best_fitness`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let step = match self.algorithm {
            Algorithm::Genetic => "generation",
            Algorithm::Bfgs => "iteration",
        };
        w.write_record([step, "best_fitness"]).map_err(|e| csv_err(path, e))?;
        for (i, f) in self.trace.iter().enumerate() {
            w.write_record([i.to_string(), f.to_string()]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn clip(x: f64, (lo, hi): (f64, f64)) -> f64 {
    x.clamp(lo, hi)
}

/// Blend crossover: gene-wise `gamma = (1 + 2 alpha) u - alpha`, `u ~ U[0, 1)`,
/// children `(1 - gamma) a + gamma b` and `gamma a + (1 - gamma) b`.
pub fn blend_crossover<R: Rng + ?Sized>(a: &[f64], b: &[f64], alpha: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "crossover parents differ in length");
    let mut ca = Vec::with_capacity(a.len());
    let mut cb = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let gamma = (1.0 + 2.0 * alpha) * rng.random::<f64>() - alpha;
        ca.push((1.0 - gamma) * x + gamma * y);
        cb.push(gamma * x + (1.0 - gamma) * y);
    }
    (ca, cb)
}

/// Adds `N(0, std^2)` to each gene with probability `gene_prob`, then clips to `bounds`.
pub fn gaussian_mutate<R: Rng + ?Sized>(
    v: &[f64],
    gene_prob: f64,
    std: f64,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Vec<f64> {
    let normal = Normal::new(0.0, std).ok();
    v.iter()
        .zip(bounds)
        .map(|(&x, &b)| {
            if rng.random::<f64>() < gene_prob {
                match &normal {
                    Some(n) if std > 0.0 => clip(x + n.sample(rng), b),
                    _ => x,
                }
            } else {
                x
            }
        })
        .collect()
}

fn evaluate_all<F>(f: &F, pop: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let values: Vec<f64> = pop.par_iter().map(|x| f(x)).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFitness {
            value: values[i],
            point: pop[i].clone(),
        });
    }
    Ok(values)
}

/// Keeps the `mu` fittest; ties keep their original order.
fn select_best(pop: Vec<Vec<f64>>, fit: Vec<f64>, mu: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]));
    order.truncate(mu);
    (order.iter().map(|&i| pop[i].clone()).collect(), order.iter().map(|&i| fit[i]).collect())
}

/// Minimizes `f` over the box `cfg.bounds`.
pub fn ga_minimize<F>(f: &F, cfg: &GaConfig) -> Result<OptResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[0]));
    let initial: Vec<Vec<f64>> = (0..cfg.pop_init)
        .map(|_| cfg.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
        .collect();
    ga_minimize_from(f, cfg, initial, |_, _, _| {})
}

/// GA from an explicit initial population; `observe(generation, population, fitness)`
/// sees the selected parents after every generation.
pub fn ga_minimize_from<F, O>(f: &F, cfg: &GaConfig, initial: Vec<Vec<f64>>, mut observe: O) -> Result<OptResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
    O: FnMut(usize, &[Vec<f64>], &[f64]),
{
    cfg.validate()?;
    let p = cfg.bounds.len();
    if initial.is_empty() || initial.iter().any(|x| x.len() != p) {
        return Err(Error::InvalidArgument(format!("initial population must hold vectors of length {p}")));
    }
    let mut fitness = evaluate_all(f, &initial)?;
    let mut evaluations = initial.len();
    let mut population = initial;

    let best_of = |pop: &[Vec<f64>], fit: &[f64]| -> (Vec<f64>, f64) {
        let i = (0..fit.len()).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).unwrap();
        (pop[i].clone(), fit[i])
    };
    let (mut best_mu, mut best_fitness) = best_of(&population, &fitness);
    let mut trace = vec![best_fitness];
    observe(0, &population, &fitness);

    for generation in 1..=cfg.generations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[generation as u64]));
        let mut offspring = Vec::with_capacity(cfg.lambda_offspring);
        for _ in 0..cfg.lambda_offspring {
            let u: f64 = rng.random();
            let child = if u < cfg.cx_prob && population.len() >= 2 {
                let i = rng.random_range(0..population.len());
                let mut j = rng.random_range(0..population.len() - 1);
                if j >= i {
                    j += 1;
                }
                let (c, _) = blend_crossover(&population[i], &population[j], cfg.blend_alpha, &mut rng);
                c.into_iter().zip(&cfg.bounds).map(|(x, &b)| clip(x, b)).collect()
            } else if u < cfg.cx_prob + cfg.mut_prob {
                let i = rng.random_range(0..population.len());
                gaussian_mutate(&population[i], cfg.mutation_gene_prob, cfg.mutation_std, &cfg.bounds, &mut rng)
            } else {
                population[rng.random_range(0..population.len())].clone()
            };
            offspring.push(child);
        }
        let off_fit = evaluate_all(f, &offspring)?;
        evaluations += offspring.len();
        population.extend(offspring);
        fitness.extend(off_fit);
        (population, fitness) = select_best(population, fitness, cfg.mu_select);

        let (mu, fit) = best_of(&population, &fitness);
        if fit < best_fitness {
            best_fitness = fit;
            best_mu = mu;
        }
        trace.push(best_fitness);
        observe(generation, &population, &fitness);
    }
    Ok(OptResult {
        algorithm: Algorithm::Genetic,
        best_mu,
        best_fitness,
        trace,
        evaluations,
        gradient_evaluations: 0,
        termination: Termination::Generations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsConfig {
    /// Absolute forward-difference step.
    pub fd_step: f64,
    /// Stop once the largest gradient component falls to this value.
    pub gtol: f64,
    pub max_iterations: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-7,
            gtol: 1e-5,
            max_iterations: 200,
        }
    }
}

impl BfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0) || !(self.gtol >= 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("BFGS needs fd_step > 0, gtol >= 0, max_iterations > 0".into()));
        }
        Ok(())
    }
}

struct Counted<'a, F> {
    f: &'a F,
    evaluations: usize,
}

impl<F: Fn(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let v = (self.f)(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteFitness {
                value: v,
                point: x.to_vec(),
            });
        }
        Ok(v)
    }
}

/// Forward differences with the step actually representable at `x`:
/// a component whose step rounds away contributes a zero derivative.
fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &mut Counted<F>, x: &[f64], fx: f64, h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let dx = (x[i] + h) - x[i];
        xp[i] = x[i] + h;
        let fp = f.eval(&xp)?;
        xp[i] = x[i];
        g[i] = if dx == 0.0 { 0.0 } else { (fp - fx) / dx };
    }
    Ok(g)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton minimization with forward-difference gradients of absolute step `cfg.fd_step`.
///
/// Line search: Armijo backtracking seeded by the minimizer of the quadratic
/// through `f(0)`, `f'(0)` and `f(1)`. Unbounded; `best_mu` is the last accepted point.
pub fn bfgs_minimize<F>(f: &F, x0: &[f64], cfg: &BfgsConfig) -> Result<OptResult>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("BFGS needs a non-empty start point".into()));
    }
    let mut fc = Counted { f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut fx = fc.eval(&x)?;
    let mut g = fd_gradient(&mut fc, &x, fx, cfg.fd_step)?;
    let mut gradient_evaluations = 1;
    let mut trace = vec![fx];
    let mut h_inv = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut first_update = true;

    let termination = loop {
        if g.iter().all(|&c| c == 0.0) {
            break Termination::VanishingGradient;
        }
        if g.iter().all(|c| c.abs() <= cfg.gtol) {
            break Termination::GradientTolerance;
        }
        if trace.len() > cfg.max_iterations {
            break Termination::MaxIterations;
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (-(&h_inv * &gv)).as_slice().to_vec();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // not a descent direction: restart from steepest descent
            h_inv = nalgebra::DMatrix::identity(n, n);
            first_update = true;
            d = g.iter().map(|c| -c).collect();
            slope = dot(&g, &d);
        }

        let step = |alpha: f64| -> Vec<f64> { x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect() };
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..40 {
            let xa = step(alpha);
            let fa = fc.eval(&xa)?;
            // quadratic model through f(0), f'(0), f(alpha)
            let curv = fa - fx - slope * alpha;
            let mut best = (alpha, xa, fa);
            if curv > 0.0 {
                let aq = -slope * alpha * alpha / (2.0 * curv);
                if aq > 0.0 && (aq - alpha).abs() > 1e-12 * alpha && aq < 1e3 * alpha {
                    let xq = step(aq);
                    let fq = fc.eval(&xq)?;
                    if fq < best.2 {
                        best = (aq, xq, fq);
                    }
                }
            }
            if best.2 <= fx + 1e-4 * best.0 * slope {
                accepted = Some(best);
                break;
            }
            alpha = if curv > 0.0 {
                (-slope * alpha * alpha / (2.0 * curv)).clamp(0.1 * alpha, 0.5 * alpha)
            } else {
                0.5 * alpha
            };
        }
        let Some((_, x_new, f_new)) = accepted else {
            break Termination::LineSearchFailure;
        };

        let g_new = fd_gradient(&mut fc, &x_new, f_new, cfg.fd_step)?;
        gradient_evaluations += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first_update {
                h_inv = nalgebra::DMatrix::identity(n, n) * (sy / dot(&y, &y));
                first_update = false;
            }
            let sv = nalgebra::DVector::from_column_slice(&s);
            let yv = nalgebra::DVector::from_column_slice(&y);
            let rho = 1.0 / sy;
            let eye = nalgebra::DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &sv * yv.transpose();
            let right = &eye - rho * &yv * sv.transpose();
            h_inv = &left * &h_inv * &right + rho * &sv * sv.transpose();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
    };

    Ok(OptResult {
        algorithm: Algorithm::Bfgs,
        best_mu: x,
        best_fitness: fx,
        trace,
        evaluations: fc.evaluations,
        gradient_evaluations,
        termination,
    })
}

/// Wake values the fitness compares against, optionally only at some geometry points.
#[derive(Debug, Clone, PartialEq)]
pub struct WakeTarget {
    /// Geometry indices compared; `None` compares every point.
    pub indices: Option<Vec<usize>>,
    /// Target values, aligned with `indices` (or with the geometry).
    pub values: Vec<f64>,
}

impl WakeTarget {
    pub fn full(field: &ScalarField) -> Self {
        Self {
            indices: None,
            values: field.values().to_vec(),
        }
    }

    /// Compares each observation against the prediction at the nearest geometry point.
    pub fn from_observations(geometry: &PlaneGeometry, obs: &ObservationSet) -> Result<Self> {
        if geometry.is_empty() {
            return Err(Error::InvalidArgument("empty geometry".into()));
        }
        let indices = obs.samples().iter().map(|&(x, y, _)| geometry.nearest(x, y)).collect();
        Ok(Self {
            indices: Some(indices),
            values: obs.values(),
        })
    }

    pub fn relative_error(&self, prediction: &[f64]) -> Result<f64> {
        let picked: Vec<f64> = match &self.indices {
            None => prediction.to_vec(),
            Some(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= prediction.len()) {
                    return Err(Error::InvalidArgument(format!("target index {bad} outside the prediction")));
                }
                idx.iter().map(|&i| prediction[i]).collect()
            }
        };
        crate::field::relative_error(&picked, &self.values)
    }
}

/// `mu -> |rom(mu) - target| / |target|`; NaN on evaluation errors, which
/// the optimizers report as non-finite fitness.
pub fn rom_fitness(rom: Arc<Rom>, target: WakeTarget) -> impl Fn(&[f64]) -> f64 + Sync + Send {
    move |mu: &[f64]| match rom.predict_values(mu).and_then(|pred| target.relative_error(&pred)) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("fitness evaluation failed at {mu:?}: {e}");
            f64::NAN
        }
    }
}
