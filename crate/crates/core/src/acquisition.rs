//! Acquisition functions over a GP of the log-posterior.
//!
//! The log-normal kinds treat `exp(GP(z))` as a log-normal process and score
//! a point by the entropy or the variance of its marginal. UCB scores the GP
//! itself. [`maximize_acquisition`] scans a coarse grid over a search box and
//! polishes the best cells with Nelder-Mead.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::par::{self, Execution};
use crate::rng::Rng;
use crate::LatentCode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcquisitionKind {
    LognormalEntropy,
    LognormalVariance,
    Ucb { kappa: f64 },
}

impl AcquisitionKind {
    pub const DEFAULT_KAPPA: f64 = 2.0;

    pub fn validate(&self) -> Result<()> {
        match self {
            AcquisitionKind::Ucb { kappa } if !(*kappa > 0.0) => Err(Error::invalid("UCB kappa must be positive")),
            _ => Ok(()),
        }
    }

    pub fn is_lognormal(&self) -> bool {
        !matches!(self, AcquisitionKind::Ucb { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            AcquisitionKind::LognormalEntropy => "entropy",
            AcquisitionKind::LognormalVariance => "variance",
            AcquisitionKind::Ucb { .. } => "ucb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::dims(lower.len(), upper.len()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::invalid("search box needs lower < upper in every dimension"));
        }
        Ok(SearchBox { lower, upper })
    }

    /// `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| (*l..=*u).contains(v))
    }

    pub fn clamp(&self, z: &[f64]) -> LatentCode {
        z.iter().zip(self.lower.iter().zip(&self.upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect()
    }

    /// Tensor grid with `per_axis` points per axis including both faces,
    /// last axis fastest.
    pub fn grid(&self, per_axis: usize) -> Vec<LatentCode> {
        let d = self.dim();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                let mut z = vec![0.0; d];
                for k in (0..d).rev() {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    z[k] = self.lower[k] + (self.upper[k] - self.lower[k]) * i as f64 / (per_axis - 1) as f64;
                }
                z
            })
            .collect()
    }
}

/// `μ + ½ + ln(√(2π) σ)`: entropy of a log-normal marginal.
pub fn lognormal_entropy(mu: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {var}")));
    }
    Ok(mu + 0.5 + ((2.0 * PI).sqrt() * var.sqrt()).ln())
}

/// `ln[(exp(σ²) - 1) exp(2μ + σ²)]`, finite wherever the variance itself
/// would overflow or underflow.
pub fn lognormal_log_variance(mu: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {var}")));
    }
    Ok(var.exp_m1().ln() + 2.0 * mu + var)
}

/// `(exp(σ²) - 1) exp(2μ + σ²)`: variance of a log-normal marginal. Returns
/// `+inf` on overflow; use [`lognormal_log_variance`] to compare such values.
pub fn lognormal_variance(mu: f64, var: f64) -> Result<f64> {
    Ok(lognormal_log_variance(mu, var)?.exp())
}

/// `μ + κ σ`.
pub fn ucb(mu: f64, var: f64, kappa: f64) -> f64 {
    mu + kappa * var.max(0.0).sqrt()
}

/// Acquisition value from a GP prediction. The log-normal variance is scored
/// in log space; the GP variance is floored at the smallest positive double
/// so that fully-determined points score very low instead of erroring.
pub fn acquisition_from_prediction(kind: &AcquisitionKind, mu: f64, var: f64) -> f64 {
    let v = var.max(f64::MIN_POSITIVE);
    match kind {
        AcquisitionKind::LognormalEntropy => lognormal_entropy(mu, v).expect("positive variance"),
        AcquisitionKind::LognormalVariance => lognormal_log_variance(mu, v).expect("positive variance"),
        AcquisitionKind::Ucb { kappa } => ucb(mu, var, *kappa),
    }
}

pub fn evaluate_acquisition(gp: &GpPosterior, kind: &AcquisitionKind, z: &[f64]) -> f64 {
    let (mu, var) = gp.predict(z);
    acquisition_from_prediction(kind, mu, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximizerOptions {
    pub grid_per_axis: usize,
    pub n_refine: usize,
    pub refine_evals: usize,
}

impl Default for MaximizerOptions {
    fn default() -> Self {
        MaximizerOptions { grid_per_axis: 41, n_refine: 5, refine_evals: 120 }
    }
}

/// Grid scan followed by Nelder-Mead from the best `n_refine` cells. The
/// returned point is clamped into the box. Ties keep the first cell found.
pub fn maximize_acquisition(
    gp: &GpPosterior,
    kind: &AcquisitionKind,
    bounds: &SearchBox,
    opts: &MaximizerOptions,
    rng: &mut Rng,
) -> LatentCode {
    let grid = bounds.grid(opts.grid_per_axis);
    let values = par::map_slice(Execution::default(), &grid, |z| evaluate_acquisition(gp, kind, z));
    let mut order: Vec<usize> = (0..grid.len()).collect();
    // Stable sort: equal values keep grid order.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let cell: Vec<f64> = bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| (u - l) / (opts.grid_per_axis.max(2) - 1) as f64).collect();
    let mut best_z = grid[order[0]].clone();
    let mut best_v = values[order[0]];
    for &start in order.iter().take(opts.n_refine) {
        let step = cell.iter().copied().fold(f64::INFINITY, f64::min) * (0.5 + 0.5 * rng.random::<f64>());
        let nm = NelderMeadOptions { max_evals: opts.refine_evals, initial_step: step, f_tol: 1e-12, x_tol: 1e-7 };
        let m = nelder_mead(|z| -evaluate_acquisition(gp, kind, &bounds.clamp(z)), &grid[start], &nm);
        let z = bounds.clamp(&m.x);
        let v = evaluate_acquisition(gp, kind, &z);
        if v > best_v {
            best_v = v;
            best_z = z;
        }
    }
    best_z
}

/// Acquisition surface on a tensor grid as `z_0,...,z_{d-1},value` rows.
pub fn acquisition_grid_csv(gp: &GpPosterior, kind: &AcquisitionKind, bounds: &SearchBox, per_axis: usize) -> String {
    let grid = bounds.grid(per_axis);
    let values = par::map_slice(Execution::default(), &grid, |z| evaluate_acquisition(gp, kind, z));
    let mut out: String = (0..bounds.dim()).map(|k| format!("z{k},")).collect();
    out.push_str("value\n");
    for (z, v) in grid.iter().zip(values) {
        for c in z {
            out.push_str(&format!("{c},"));
        }
        out.push_str(&format!("{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gp_fit, GpTrainingSet, KernelHyperparams};
    use crate::rng::seeded;

    #[test]
    fn entropy_values() {
        let e = lognormal_entropy(0.0, 1.0).unwrap();
        assert!((e - (0.5 + (2.0 * PI).sqrt().ln())).abs() < 1e-15);
        assert!((e - 1.41894).abs() < 1e-5);
        assert!((lognormal_entropy(2.5, 1.0).unwrap() - e - 2.5).abs() < 1e-12);
        assert!(lognormal_entropy(0.0, 0.0).is_err());
    }

    #[test]
    fn variance_values() {
        let e = std::f64::consts::E;
        assert!((lognormal_variance(0.0, 1.0).unwrap() - (e - 1.0) * e).abs() < 1e-12);
        assert!((lognormal_variance(0.0, 1.0).unwrap() - 4.6708).abs() < 1e-4);
        assert!(lognormal_variance(0.0, 1e-12).unwrap() < 1e-11);
        assert!(lognormal_variance(0.0, -1.0).is_err());
        // Log space stays finite where the variance underflows.
        let lv = lognormal_log_variance(-2000.0, 0.5).unwrap();
        assert!(lv.is_finite());
        assert_eq!(lognormal_variance(-2000.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ucb_values() {
        assert_eq!(ucb(1.3, 2.0, 0.0), 1.3);
        assert_eq!(ucb(1.3, 0.0, 2.0), 1.3);
        assert_eq!(ucb(1.0, 4.0, 2.0), 5.0);
        assert!(AcquisitionKind::Ucb { kappa: 0.0 }.validate().is_err());
    }

    #[test]
    fn monotone_in_mean_and_variance() {
        let mut r = seeded(2);
        for _ in 0..200 {
            let mu: f64 = r.random_range(-50.0..5.0);
            let var: f64 = r.random_range(1e-3..10.0);
            let dm: f64 = r.random_range(1e-3..1.0);
            let dv: f64 = r.random_range(1e-3..1.0);
            for f in [lognormal_entropy, lognormal_log_variance] {
                assert!(f(mu + dm, var).unwrap() > f(mu, var).unwrap());
                assert!(f(mu, var + dv).unwrap() > f(mu, var).unwrap());
            }
        }
    }

    fn one_point_gp() -> GpPosterior {
        let ts = GpTrainingSet::from_pairs(vec![vec![0.5, -0.5]], vec![-1.0]).unwrap();
        gp_fit(&ts, &KernelHyperparams::isotropic(1.0, 1.0, 2, 1e-6)).unwrap()
    }

    #[test]
    fn composition_with_prediction() {
        let gp = one_point_gp();
        let z = [0.1, 0.3];
        let (mu, var) = gp.predict(&z);
        assert_eq!(evaluate_acquisition(&gp, &AcquisitionKind::LognormalEntropy, &z), lognormal_entropy(mu, var).unwrap());
        // Mirror images about the data point have identical predictions.
        let a = [0.5 + 0.7, -0.5 + 0.2];
        let b = [0.5 - 0.7, -0.5 - 0.2];
        for kind in [AcquisitionKind::LognormalEntropy, AcquisitionKind::LognormalVariance, AcquisitionKind::Ucb { kappa: 2.0 }] {
            assert_eq!(evaluate_acquisition(&gp, &kind, &a), evaluate_acquisition(&gp, &kind, &b));
        }
    }

    #[test]
    fn far_point_beats_visited_point() {
        let ts = GpTrainingSet::from_pairs(vec![vec![0.0, 0.0], vec![3.0, 3.0]], vec![0.0, 0.0]).unwrap();
        let gp = gp_fit(&ts, &KernelHyperparams::isotropic(1.0, 0.5, 2, 1e-6)).unwrap();
        for kind in [AcquisitionKind::LognormalEntropy, AcquisitionKind::LognormalVariance, AcquisitionKind::Ucb { kappa: 2.0 }] {
            assert!(evaluate_acquisition(&gp, &kind, &[-3.0, 3.0]) > evaluate_acquisition(&gp, &kind, &[0.0, 0.0]));
        }
    }

    #[test]
    fn maximizer_stays_in_box_and_is_deterministic() {
        let gp = gp_fit(&GpTrainingSet::new(), &KernelHyperparams::isotropic(1.0, 1.0, 2, 1e-6)).unwrap();
        let bounds = SearchBox::symmetric(2, 4.0).unwrap();
        let kind = AcquisitionKind::LognormalEntropy;
        let opts = MaximizerOptions::default();
        let a = maximize_acquisition(&gp, &kind, &bounds, &opts, &mut seeded(3));
        let b = maximize_acquisition(&gp, &kind, &bounds, &opts, &mut seeded(3));
        assert_eq!(a, b);
        assert!(bounds.contains(&a));
        let gp1 = one_point_gp();
        for seed in 0..5 {
            let z = maximize_acquisition(&gp1, &AcquisitionKind::Ucb { kappa: 2.0 }, &bounds, &opts, &mut seeded(seed));
            assert!(bounds.contains(&z));
        }
    }

    #[test]
    fn grid_covers_corners() {
        let b = SearchBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = b.grid(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![-1.0, 0.0]);
        assert_eq!(g[1], vec![-1.0, 1.0]);
        assert_eq!(g[8], vec![1.0, 2.0]);
        assert!(SearchBox::new(vec![1.0], vec![1.0]).is_err());
    }
}
