//! Zero-mean Gaussian-process regression with an anisotropic Matérn 5/2 kernel.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, solve_lower, Cholesky};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::Rng;
use crate::LatentCode;

/// Jitter added (relative to the kernel amplitude) when `K + σ_n² I` does not factor.
pub const JITTER_LADDER: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];
pub const NOISE_FLOOR: f64 = 1e-10;
pub const DUPLICATE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// Signal variance α².
    pub amplitude2: f64,
    /// Diagonal of Λ: inverse squared length scale per input dimension.
    pub inv_lengthscale2: Vec<f64>,
    /// Observation noise variance σ_n².
    pub noise_var: f64,
}

impl KernelHyperparams {
    pub fn isotropic(amplitude2: f64, lengthscale: f64, dim: usize, noise_var: f64) -> Self {
        KernelHyperparams { amplitude2, inv_lengthscale2: vec![1.0 / (lengthscale * lengthscale); dim], noise_var }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude2 > 0.0 && self.amplitude2.is_finite()) {
            return Err(Error::invalid("amplitude2 must be positive"));
        }
        if self.inv_lengthscale2.is_empty() || self.inv_lengthscale2.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("inverse length scales must be positive"));
        }
        if !(self.noise_var >= NOISE_FLOOR && self.noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise_var must be >= {NOISE_FLOOR}")));
        }
        Ok(())
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.inv_lengthscale2.iter().map(|l| 1.0 / l.sqrt()).collect()
    }

    fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.amplitude2.ln()];
        v.extend(self.inv_lengthscale2.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        KernelHyperparams {
            amplitude2: v[0].clamp(-30.0, 40.0).exp(),
            inv_lengthscale2: v[1..=d].iter().map(|x| x.clamp(-12.0, 12.0).exp()).collect(),
            noise_var: v[d + 1].clamp(NOISE_FLOOR.ln(), 40.0).exp(),
        }
    }
}

/// `α² exp(-√5 d) (1 + √5 d + 5/3 d²)` with `d² = (a-b)ᵀ Λ (a-b)`.
pub fn matern52(a: &[f64], b: &[f64], hp: &KernelHyperparams) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let d2: f64 = a.iter().zip(b).zip(&hp.inv_lengthscale2).map(|((x, y), l)| l * (x - y) * (x - y)).sum();
    let d = d2.sqrt();
    let s5d = 5f64.sqrt() * d;
    hp.amplitude2 * (-s5d).exp() * (1.0 + s5d + 5.0 / 3.0 * d2)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GpTrainingSet {
    pub inputs: Vec<LatentCode>,
    pub targets: Vec<f64>,
}

impl GpTrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(inputs: Vec<LatentCode>, targets: Vec<f64>) -> Result<Self> {
        let mut ts = GpTrainingSet::new();
        if inputs.len() != targets.len() {
            return Err(Error::dims(inputs.len(), targets.len()));
        }
        for (z, y) in inputs.into_iter().zip(targets) {
            ts.push(z, y)?;
        }
        Ok(ts)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(|z| z.len())
    }

    /// True if some stored input lies within [`DUPLICATE_TOL`] of `z`.
    pub fn contains_near(&self, z: &[f64]) -> bool {
        self.inputs.iter().any(|x| x.iter().zip(z).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
    }

    pub fn push(&mut self, z: LatentCode, target: f64) -> Result<()> {
        if !target.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("training pairs must be finite"));
        }
        if let Some(d) = self.dim() {
            if z.len() != d {
                return Err(Error::dims(d, z.len()));
            }
        }
        if self.contains_near(&z) {
            return Err(Error::invalid(format!("duplicate input {z:?}")));
        }
        self.inputs.push(z);
        self.targets.push(target);
        Ok(())
    }
}

fn kernel_matrix(ts: &GpTrainingSet, hp: &KernelHyperparams) -> Array2<f64> {
    let n = ts.len();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v = matern52(&ts.inputs[i], &ts.inputs[j], hp);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
        k[[i, i]] += hp.noise_var;
    }
    k
}

fn factor(ts: &GpTrainingSet, hp: &KernelHyperparams) -> Result<Cholesky> {
    cholesky_with_jitter(&kernel_matrix(ts, hp), &JITTER_LADDER, hp.amplitude2.max(1.0))
}

/// Exact GP posterior conditioned on a training set.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub training: GpTrainingSet,
    pub hyperparams: KernelHyperparams,
    pub chol: Cholesky,
    /// `(K + σ_n² I)⁻¹ ℒ`.
    pub weights: Array1<f64>,
}

pub fn gp_fit(ts: &GpTrainingSet, hp: &KernelHyperparams) -> Result<GpPosterior> {
    hp.validate()?;
    if let Some(d) = ts.dim() {
        if d != hp.inv_lengthscale2.len() {
            return Err(Error::dims(hp.inv_lengthscale2.len(), d));
        }
    }
    let chol = factor(ts, hp)?;
    let weights = chol.solve(&Array1::from(ts.targets.clone()));
    Ok(GpPosterior { training: ts.clone(), hyperparams: hp.clone(), chol, weights })
}

impl GpPosterior {
    fn k_star(&self, z: &[f64]) -> Array1<f64> {
        self.training.inputs.iter().map(|x| matern52(x, z, &self.hyperparams)).collect()
    }

    /// Predictive mean only.
    pub fn mean(&self, z: &[f64]) -> f64 {
        self.training.inputs.iter().zip(self.weights.iter()).map(|(x, w)| w * matern52(x, z, &self.hyperparams)).sum()
    }

    /// Predictive mean and latent-function variance before clamping.
    pub fn predict_raw(&self, z: &[f64]) -> (f64, f64) {
        let prior = self.hyperparams.amplitude2;
        if self.training.is_empty() {
            return (0.0, prior);
        }
        let k = self.k_star(z);
        let mu = k.dot(&self.weights);
        let v = solve_lower(&self.chol.l, &k);
        (mu, prior - v.dot(&v))
    }

    /// `(μ, σ²)` at `z`; the variance is clamped at zero.
    pub fn predict(&self, z: &[f64]) -> (f64, f64) {
        let (mu, var) = self.predict_raw(z);
        (mu, var.max(0.0))
    }
}

pub fn gp_predict(gp: &GpPosterior, z: &[f64]) -> (f64, f64) {
    gp.predict(z)
}

/// `-½ ℒᵀ(K+σ_n²I)⁻¹ℒ - ½ log det(K+σ_n²I) - n/2 log 2π`.
pub fn log_marginal_likelihood(ts: &GpTrainingSet, hp: &KernelHyperparams) -> Result<f64> {
    hp.validate()?;
    let chol = factor(ts, hp)?;
    let y = Array1::from(ts.targets.clone());
    let alpha = solve_lower(&chol.l, &y);
    let n = ts.len() as f64;
    Ok(-0.5 * alpha.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Debug, Clone)]
pub struct HyperoptOutcome {
    pub hyperparams: KernelHyperparams,
    pub lml: f64,
    /// Set when no start produced a finite objective; `hyperparams` is then `init`.
    pub all_failed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct HyperoptOptions {
    pub restarts: usize,
    pub evals_per_start: usize,
    pub perturbation: f64,
}

impl Default for HyperoptOptions {
    fn default() -> Self {
        HyperoptOptions { restarts: 5, evals_per_start: 150, perturbation: 1.0 }
    }
}

/// Maximises the log marginal likelihood over log-hyperparameters with
/// multi-start Nelder-Mead: the first start is `init`, the rest are Gaussian
/// perturbations of it in log space. Never returns something worse than `init`.
pub fn optimize_hyperparams(
    ts: &GpTrainingSet,
    init: &KernelHyperparams,
    opts: &HyperoptOptions,
    rng: &mut Rng,
) -> Result<HyperoptOutcome> {
    if ts.len() < 3 {
        return Err(Error::invalid("hyperparameter optimisation needs at least 3 points"));
    }
    init.validate()?;
    let objective = |v: &[f64]| match log_marginal_likelihood(ts, &KernelHyperparams::from_log(v)) {
        Ok(l) if l.is_finite() => -l,
        _ => f64::INFINITY,
    };
    let x0 = init.to_log();
    let init_lml = log_marginal_likelihood(ts, init).ok().filter(|l| l.is_finite());
    let nm = NelderMeadOptions { max_evals: opts.evals_per_start, initial_step: 0.5, f_tol: 1e-10, x_tol: 1e-6 };

    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..opts.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            x0.clone()
        } else {
            x0.iter().map(|x| x + opts.perturbation * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
        };
        let m = nelder_mead(objective, &start, &nm);
        if m.value.is_finite() && best.as_ref().is_none_or(|(_, v)| m.value < *v) {
            best = Some((m.x, m.value));
        }
    }

    match (best, init_lml) {
        (Some((x, v)), Some(l0)) if -v > l0 => {
            Ok(HyperoptOutcome { hyperparams: KernelHyperparams::from_log(&x), lml: -v, all_failed: false })
        }
        (Some((x, v)), None) => Ok(HyperoptOutcome { hyperparams: KernelHyperparams::from_log(&x), lml: -v, all_failed: false }),
        (_, Some(l0)) => Ok(HyperoptOutcome { hyperparams: init.clone(), lml: l0, all_failed: false }),
        (None, None) => {
            log::warn!("hyperparameter search failed from every start; keeping initial values");
            Ok(HyperoptOutcome { hyperparams: init.clone(), lml: f64::NEG_INFINITY, all_failed: true })
        }
    }
}
