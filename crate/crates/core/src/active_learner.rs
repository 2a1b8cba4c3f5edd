//! Bayesian active learning of the latent log-posterior.
//!
//! Each iteration re-fits the GP hyperparameters, picks the acquisition
//! maximiser, evaluates the exact log-posterior there (decoder, simulator,
//! lead field) and refits. The loop stops when the normalised surrogate pdf
//! `exp(μ(z))` stops changing: the KL divergence from the newest pdf grid to
//! the average of the previous `kl_window` grids drops below a threshold.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::acquisition::{maximize_acquisition, AcquisitionKind, MaximizerOptions, SearchBox};
use crate::error::{Error, Result};
use crate::forward_model::{
    apply_lead_field, resample_field, squared_residual, GridGeometry, LeadField, LikelihoodConfig, MeasurementSeries, Simulator,
    StimulusProtocol,
};
use crate::gp::{gp_fit, optimize_hyperparams, GpPosterior, GpTrainingSet, HyperoptOptions, KernelHyperparams};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::vae::VaeModel;
use crate::LatentCode;

/// An expensive log-density on the latent space. Implementations count
/// their evaluations and must tolerate concurrent calls.
pub trait LogTarget: Sync {
    fn log_density(&self, z: &[f64]) -> Result<f64>;
    fn eval_count(&self) -> usize;
}

/// `-½(‖Y_obs - M(decode(z))‖² / σ_e² + ‖z‖²)`.
pub struct TargetPosterior<'a> {
    pub vae: &'a VaeModel,
    pub simulator: &'a Simulator,
    /// Geometry the decoder was trained on, when it differs from the simulator's.
    pub decoder_geometry: Option<GridGeometry>,
    pub stimulus: StimulusProtocol,
    pub lead_field: &'a LeadField,
    pub observed: &'a MeasurementSeries,
    pub likelihood: LikelihoodConfig,
    evals: AtomicUsize,
}

impl<'a> TargetPosterior<'a> {
    pub fn new(
        vae: &'a VaeModel,
        simulator: &'a Simulator,
        decoder_geometry: Option<GridGeometry>,
        stimulus: StimulusProtocol,
        lead_field: &'a LeadField,
        observed: &'a MeasurementSeries,
        likelihood: LikelihoodConfig,
    ) -> Self {
        TargetPosterior { vae, simulator, decoder_geometry, stimulus, lead_field, observed, likelihood, evals: AtomicUsize::new(0) }
    }

    /// Simulated measurements for a latent code (not counted).
    pub fn simulate_measurements(&self, z: &[f64]) -> Result<MeasurementSeries> {
        let mut theta = self.vae.decode_mean(z)?;
        if let Some(from) = &self.decoder_geometry {
            theta = resample_field(&theta, from, self.simulator.geometry())?;
        }
        let frames = self.simulator.simulate(&theta, &self.stimulus)?;
        apply_lead_field(self.lead_field, &frames)
    }
}

impl LogTarget for TargetPosterior<'_> {
    fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let y = self.simulate_measurements(z).map_err(|e| Error::SimulationAtLatent { z: z.to_vec(), source: Box::new(e) })?;
        let r2 = squared_residual(self.observed, &y)?;
        let s2 = self.likelihood.sigma_e * self.likelihood.sigma_e;
        Ok(-0.5 * (r2 / s2 + z.iter().map(|v| v * v).sum::<f64>()))
    }

    fn eval_count(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

pub fn log_post_z(target: &dyn LogTarget, z: &[f64]) -> Result<f64> {
    target.log_density(z)
}

/// Wraps a closure as a counted [`LogTarget`].
pub struct FnTarget<F> {
    f: F,
    evals: AtomicUsize,
}

impl<F> FnTarget<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(f: F) -> Self {
        FnTarget { f, evals: AtomicUsize::new(0) }
    }
}

impl<F> LogTarget for FnTarget<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok((self.f)(z))
    }

    fn eval_count(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Latin-hypercube design: every axis hits each of the `n` strata once.
pub fn initial_design(bounds: &SearchBox, n: usize, rng: &mut Rng) -> Result<Vec<LatentCode>> {
    if n == 0 {
        return Err(Error::invalid("design size must be >= 1"));
    }
    let d = bounds.dim();
    let perms: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let u = (perms[k][i] as f64 + rng.random::<f64>()) / n as f64;
                    bounds.lower[k] + u * (bounds.upper[k] - bounds.lower[k])
                })
                .collect()
        })
        .collect())
}

/// A normalised density on a tensor grid with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfGrid {
    pub bounds: SearchBox,
    pub per_axis: usize,
    pub density: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PdfGrid {
    /// Normalises `exp(log_values)` (given on `bounds.grid(per_axis)`).
    pub fn from_log_values(bounds: &SearchBox, per_axis: usize, log_values: &[f64]) -> Result<Self> {
        let weights = trapezoid_weights(bounds, per_axis);
        if log_values.len() != weights.len() {
            return Err(Error::dims(weights.len(), log_values.len()));
        }
        let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateDensity("no finite log-density on grid".into()));
        }
        let unnorm: Vec<f64> = log_values.iter().map(|l| (l - max).exp()).collect();
        let mass: f64 = unnorm.iter().zip(&weights).map(|(p, w)| p * w).sum();
        if !(mass > 0.0) {
            return Err(Error::DegenerateDensity("zero mass on grid".into()));
        }
        Ok(PdfGrid { bounds: bounds.clone(), per_axis, density: unnorm.iter().map(|p| p / mass).collect(), weights })
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    pub fn points(&self) -> Vec<LatentCode> {
        self.bounds.grid(self.per_axis)
    }

    /// `∫ p log(p / q)` by the same quadrature, with `q` floored at 1e-12.
    pub fn kl_to(&self, q: &[f64]) -> f64 {
        self.density
            .iter()
            .zip(q)
            .zip(&self.weights)
            .filter(|((p, _), _)| **p > 0.0)
            .map(|((p, q), w)| w * p * (p / q.max(1e-12)).ln())
            .sum::<f64>()
            .max(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out: String = (0..self.bounds.dim()).map(|k| format!("z{k},")).collect();
        out.push_str("density\n");
        for (z, p) in self.points().iter().zip(&self.density) {
            for c in z {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{p}\n"));
        }
        out
    }
}

fn trapezoid_weights(bounds: &SearchBox, per_axis: usize) -> Vec<f64> {
    let per_axis = per_axis.max(2);
    let steps: Vec<f64> = bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| (u - l) / (per_axis - 1) as f64).collect();
    let d = bounds.dim();
    (0..per_axis.pow(d as u32))
        .map(|mut idx| {
            let mut w = 1.0;
            for k in (0..d).rev() {
                let i = idx % per_axis;
                idx /= per_axis;
                let end = i == 0 || i == per_axis - 1;
                w *= steps[k] * if end { 0.5 } else { 1.0 };
            }
            w
        })
        .collect()
}

/// Normalised `exp(μ(z))` of the GP mean on a tensor grid.
pub fn surrogate_pdf_on_grid(gp: &GpPosterior, bounds: &SearchBox, resolution: usize) -> Result<PdfGrid> {
    if resolution < 16 {
        return Err(Error::invalid("grid resolution must be >= 16 per axis"));
    }
    let pts = bounds.grid(resolution);
    let logs = par::map_slice(Execution::default(), &pts, |z| gp.mean(z));
    PdfGrid::from_log_values(bounds, resolution, &logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalConfig {
    pub acquisition: AcquisitionKind,
    pub initial_design_size: usize,
    pub max_iterations: usize,
    pub kl_threshold: f64,
    pub kl_window: usize,
    pub quadrature_grid: usize,
    pub search_half_width: f64,
    pub seed: u64,
    /// When false the loop always runs `max_iterations` (fixed-budget runs).
    pub stop_on_convergence: bool,
    pub hyperopt_restarts: usize,
    pub hyperopt_evals: usize,
    pub maximizer: MaximizerOptions,
}

impl Default for BalConfig {
    fn default() -> Self {
        BalConfig {
            acquisition: AcquisitionKind::LognormalEntropy,
            initial_design_size: 10,
            max_iterations: 290,
            kl_threshold: 0.02,
            kl_window: 5,
            quadrature_grid: 81,
            search_half_width: 4.0,
            seed: 0,
            stop_on_convergence: true,
            hyperopt_restarts: 5,
            hyperopt_evals: 150,
            maximizer: MaximizerOptions::default(),
        }
    }
}

impl BalConfig {
    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate()?;
        if self.initial_design_size < 3 || self.kl_window == 0 || !(self.kl_threshold > 0.0) {
            return Err(Error::invalid("need initial_design_size >= 3, kl_window >= 1, kl_threshold > 0"));
        }
        if self.quadrature_grid < 16 || !(self.search_half_width > 0.0) {
            return Err(Error::invalid("quadrature grid must be >= 16 and the search box non-empty"));
        }
        Ok(())
    }

    pub fn search_box(&self, dim: usize) -> Result<SearchBox> {
        SearchBox::symmetric(dim, self.search_half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalIteration {
    pub iteration: usize,
    pub z: LatentCode,
    pub log_posterior: f64,
    pub hyperparams: KernelHyperparams,
    /// KL from the new mean pdf to the average of the previous ones.
    pub kl_to_trailing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalResult {
    pub training: GpTrainingSet,
    pub hyperparams: KernelHyperparams,
    pub initial_design_size: usize,
    pub history: Vec<BalIteration>,
    pub converged: bool,
    /// Expensive evaluations performed by this run.
    pub n_evaluations: usize,
}

impl BalResult {
    /// Rebuilds the final GP posterior (deterministic).
    pub fn posterior(&self) -> Result<GpPosterior> {
        gp_fit(&self.training, &self.hyperparams)
    }
}

fn initial_hyperparams(ts: &GpTrainingSet, bounds: &SearchBox) -> KernelHyperparams {
    let n = ts.len().max(1) as f64;
    let amp = (ts.targets.iter().map(|y| y * y).sum::<f64>() / n).max(1e-6);
    KernelHyperparams {
        amplitude2: amp,
        inv_lengthscale2: bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| 1.0 / ((u - l) / 4.0).powi(2)).collect(),
        noise_var: (1e-6 * amp).max(crate::gp::NOISE_FLOOR),
    }
}

/// Moves `z` off an existing training input by a tiny seeded offset.
fn dedupe(ts: &GpTrainingSet, mut z: LatentCode, bounds: &SearchBox, rng: &mut Rng) -> LatentCode {
    while ts.contains_near(&z) {
        z = bounds.clamp(&z.iter().map(|v| v + 1e-6 * (rng.random::<f64>() - 0.5)).collect::<Vec<_>>());
    }
    z
}

pub fn run_bal(target: &dyn LogTarget, cfg: &BalConfig, dim: usize) -> Result<BalResult> {
    cfg.validate()?;
    let bounds = cfg.search_box(dim)?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "bal"));
    let start_count = target.eval_count();

    let mut ts = GpTrainingSet::new();
    for z in initial_design(&bounds, cfg.initial_design_size, &mut rng)? {
        let z = dedupe(&ts, z, &bounds, &mut rng);
        let y = target.log_density(&z)?;
        ts.push(z, y)?;
    }

    let hopt = HyperoptOptions { restarts: cfg.hyperopt_restarts, evals_per_start: cfg.hyperopt_evals, perturbation: 1.0 };
    let mut hp = optimize_hyperparams(&ts, &initial_hyperparams(&ts, &bounds), &hopt, &mut rng)?.hyperparams;
    let mut gp = gp_fit(&ts, &hp)?;
    let mut trailing: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.kl_window + 1);
    trailing.push_back(surrogate_pdf_on_grid(&gp, &bounds, cfg.quadrature_grid)?.density);

    let mut history = Vec::new();
    let mut converged = false;
    for iteration in 0..cfg.max_iterations {
        hp = optimize_hyperparams(&ts, &hp, &hopt, &mut rng)?.hyperparams;
        gp = gp_fit(&ts, &hp)?;
        let z = maximize_acquisition(&gp, &cfg.acquisition, &bounds, &cfg.maximizer, &mut rng);
        let z = dedupe(&ts, z, &bounds, &mut rng);
        let y = target.log_density(&z)?;
        ts.push(z.clone(), y)?;
        gp = gp_fit(&ts, &hp)?;

        let pdf = surrogate_pdf_on_grid(&gp, &bounds, cfg.quadrature_grid)?;
        let avg: Vec<f64> = (0..pdf.density.len()).map(|i| trailing.iter().map(|g| g[i]).sum::<f64>() / trailing.len() as f64).collect();
        let kl = pdf.kl_to(&avg);
        let window_full = trailing.len() >= cfg.kl_window;
        trailing.push_back(pdf.density);
        if trailing.len() > cfg.kl_window {
            trailing.pop_front();
        }
        log::debug!("bal[{}] iter {iteration}: z = {z:?}, L = {y:.3}, kl = {kl:.5}", cfg.acquisition.label());
        history.push(BalIteration { iteration, z, log_posterior: y, hyperparams: hp.clone(), kl_to_trailing: kl });
        if window_full && kl <= cfg.kl_threshold {
            converged = true;
            if cfg.stop_on_convergence {
                break;
            }
        }
    }

    Ok(BalResult {
        training: ts,
        hyperparams: hp,
        initial_design_size: cfg.initial_design_size,
        history,
        converged,
        n_evaluations: target.eval_count() - start_count,
    })
}
