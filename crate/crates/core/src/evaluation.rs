//! Posterior comparison: Gaussian KDE, Monte-Carlo KL, latent-space summary
//! statistics, decoded field statistics and field overlap metrics.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::acquisition::SearchBox;
use crate::error::{Error, Result};
use crate::forward_model::ExcitabilityField;
use crate::par::{self, Execution};
use crate::vae::VaeModel;
use crate::LatentCode;

/// Abnormal tissue is `θ > DICE_THRESHOLD`; midway between healthy tissue
/// and the mildest test lesion.
pub const DICE_THRESHOLD: f64 = 0.275;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;
pub const MODE_GRID: usize = 101;
const DECODE_CHUNK: usize = 512;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    Silverman,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub samples: Vec<LatentCode>,
    pub bandwidth: Vec<f64>,
    /// Some dimension had zero spread and its bandwidth was floored.
    pub floored: bool,
}

fn mean_std(samples: &[LatentCode]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n).collect();
    let std = (0..d).map(|k| (samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()).collect();
    (mean, std)
}

fn check_samples(samples: &[LatentCode], min: usize) -> Result<usize> {
    if samples.len() < min {
        return Err(Error::invalid(format!("need at least {min} samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("samples must share a nonzero dimension"));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    Ok(d)
}

/// Product-Gaussian KDE. Silverman's rule gives
/// `h_j = σ_j (4 / ((d + 2) n))^(1 / (d + 4))`.
pub fn kde_fit(samples: &[LatentCode], rule: &BandwidthRule) -> Result<KdeModel> {
    let d = check_samples(samples, 10)?;
    let raw = match rule {
        BandwidthRule::Silverman => {
            let n = samples.len() as f64;
            let factor = (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
            mean_std(samples).1.into_iter().map(|s| s * factor).collect()
        }
        BandwidthRule::Fixed(h) => {
            if h.len() != d {
                return Err(Error::dims(d, h.len()));
            }
            if h.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid("fixed bandwidths must be positive"));
            }
            h.clone()
        }
    };
    let floored = raw.iter().any(|&h: &f64| h < BANDWIDTH_FLOOR);
    let bandwidth = raw.into_iter().map(|h: f64| h.max(BANDWIDTH_FLOOR)).collect();
    Ok(KdeModel { samples: samples.to_vec(), bandwidth, floored })
}

impl KdeModel {
    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let norm: f64 = self.bandwidth.iter().map(|h| h.ln() + LN_SQRT_2PI).sum::<f64>() + (self.samples.len() as f64).ln();
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let q: f64 = s.iter().zip(z).zip(&self.bandwidth).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
            let t = -0.5 * q;
            max = max.max(t);
            terms.push(t);
        }
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        max + sum.ln() - norm
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        self.log_density(z).exp()
    }

    /// Box enclosing the samples, widened by `pad` bandwidths per side.
    pub fn support(&self, pad: f64) -> Result<SearchBox> {
        bounding_box(&self.samples, &self.bandwidth.iter().map(|h| pad * h).collect::<Vec<_>>())
    }
}

fn bounding_box(samples: &[LatentCode], pad: &[f64]) -> Result<SearchBox> {
    let d = samples[0].len();
    let lower = (0..d).map(|k| samples.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min) - pad[k]).collect();
    let upper = (0..d).map(|k| samples.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max) + pad[k]).collect();
    SearchBox::new(lower, upper)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub excluded: usize,
    pub total: usize,
}

impl KlEstimate {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.total as f64
    }
}

/// `mean(log p − log q)` over samples from `p`. Samples where either log
/// density is non-finite are skipped; more than 5% skipped is an error.
pub fn kl_divergence_mc(
    p_samples: &[LatentCode],
    log_p: &(dyn Fn(&[f64]) -> f64 + Sync),
    log_q: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<KlEstimate> {
    check_samples(p_samples, 100)?;
    let diffs = par::map_slice(Execution::default(), p_samples, |z| log_p(z) - log_q(z));
    let kept: Vec<f64> = diffs.into_iter().filter(|v| v.is_finite()).collect();
    let total = p_samples.len();
    let excluded = total - kept.len();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::TooManyExclusions { excluded, total });
    }
    Ok(KlEstimate { value: kept.iter().sum::<f64>() / kept.len() as f64, excluded, total })
}

/// Log of the trapezoid-rule integral of `exp(log_f)` over `bounds`.
pub fn log_normalizer(log_f: &(dyn Fn(&[f64]) -> f64 + Sync), bounds: &SearchBox, per_axis: usize) -> Result<f64> {
    if per_axis < 2 {
        return Err(Error::invalid("quadrature needs at least 2 points per axis"));
    }
    let pts = bounds.grid(per_axis);
    let logs = par::map_slice(Execution::default(), &pts, |z| log_f(z));
    let d = bounds.dim();
    let cell: Vec<f64> = (0..d).map(|k| (bounds.upper[k] - bounds.lower[k]) / (per_axis - 1) as f64).collect();
    let max = logs.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDensity("no finite log-density on the quadrature grid".into()));
    }
    let mut total = 0.0;
    for (i, l) in logs.iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        // Grid is row-major with the last axis fastest.
        let mut rem = i;
        let mut w = 1.0;
        for k in (0..d).rev() {
            let idx = rem % per_axis;
            rem /= per_axis;
            w *= if idx == 0 || idx == per_axis - 1 { 0.5 * cell[k] } else { cell[k] };
        }
        total += w * (l - max).exp();
    }
    Ok(max + total.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleKlOptions {
    pub quadrature_per_axis: usize,
    /// At most this many `p` samples (evenly strided) enter the MC average.
    pub max_eval_points: usize,
    pub pad_bandwidths: f64,
}

impl Default for SampleKlOptions {
    fn default() -> Self {
        SampleKlOptions { quadrature_per_axis: 121, max_eval_points: 2000, pad_bandwidths: 4.0 }
    }
}

/// `KL(p ‖ q)` between two sample sets: KDEs of both, each renormalized by
/// quadrature over a box covering both sample clouds, averaged over `p`.
pub fn kl_between_samples(p: &[LatentCode], q: &[LatentCode], opts: &SampleKlOptions) -> Result<KlEstimate> {
    let d = check_samples(p, 100)?;
    if check_samples(q, 10)? != d {
        return Err(Error::dims(d, q[0].len()));
    }
    let kp = kde_fit(p, &BandwidthRule::Silverman)?;
    let kq = kde_fit(q, &BandwidthRule::Silverman)?;
    let bp = kp.support(opts.pad_bandwidths)?;
    let bq = kq.support(opts.pad_bandwidths)?;
    let bounds = SearchBox::new(
        bp.lower.iter().zip(&bq.lower).map(|(a, b)| a.min(*b)).collect(),
        bp.upper.iter().zip(&bq.upper).map(|(a, b)| a.max(*b)).collect(),
    )?;
    let lzp = log_normalizer(&|z| kp.log_density(z), &bounds, opts.quadrature_per_axis)?;
    let lzq = log_normalizer(&|z| kq.log_density(z), &bounds, opts.quadrature_per_axis)?;
    let stride = p.len().div_ceil(opts.max_eval_points.max(100));
    let eval: Vec<LatentCode> = p.iter().step_by(stride).cloned().collect();
    kl_divergence_mc(&eval, &|z| kp.log_density(z) - lzp, &|z| kq.log_density(z) - lzq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: Vec<f64>,
    pub mode: Vec<f64>,
    pub std: Vec<f64>,
}

/// Componentwise mean and (n − 1) standard deviation; the mode is the KDE
/// argmax over a grid on the sample bounding box.
pub fn z_stats(samples: &[LatentCode]) -> Result<ZStats> {
    let d = check_samples(samples, 10)?;
    let (mean, std) = mean_std(samples);
    let kde = kde_fit(samples, &BandwidthRule::Silverman)?;
    let lower: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min)).collect();
    let upper: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let per_axis = if d <= 2 { MODE_GRID } else { ((MODE_GRID * MODE_GRID) as f64).powf(1.0 / d as f64).floor().max(2.0) as usize };
    let degenerate: Vec<bool> = (0..d).map(|k| upper[k] <= lower[k]).collect();
    // Flat axes are widened for the grid and then collapsed to their value.
    let widened = SearchBox::new(lower.clone(), (0..d).map(|k| if degenerate[k] { lower[k] + 1.0 } else { upper[k] }).collect())?;
    let pts: Vec<LatentCode> = widened
        .grid(per_axis)
        .into_iter()
        .map(|mut z| {
            for k in 0..d {
                if degenerate[k] {
                    z[k] = lower[k];
                }
            }
            z
        })
        .collect();
    let logs = par::map_slice(Execution::default(), &pts, |z| kde.log_density(z));
    let best = logs.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
    Ok(ZStats { mean, mode: pts[best].clone(), std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean_field: Vec<f64>,
    pub mode_field: Vec<f64>,
    pub std_field: Vec<f64>,
}

/// Decodes every sample and summarizes the decoded fields; the mode field
/// is the decode of the latent mode.
pub fn decode_field_stats(vae: &VaeModel, samples: &[LatentCode]) -> Result<FieldStats> {
    let zs = z_stats(samples)?;
    decode_field_stats_with_mode(vae, samples, &zs.mode)
}

pub fn decode_field_stats_with_mode(vae: &VaeModel, samples: &[LatentCode], z_mode: &[f64]) -> Result<FieldStats> {
    let d = check_samples(samples, 2)?;
    if d != vae.latent_dim || z_mode.len() != d {
        return Err(Error::dims(vae.latent_dim, d));
    }
    let chunks: Vec<&[LatentCode]> = samples.chunks(DECODE_CHUNK).collect();
    let decoded =
        par::map_slice(Execution::default(), &chunks, |c| vae.decode_batch(&Array2::from_shape_fn((c.len(), d), |(i, k)| c[i][k])));
    let n = samples.len() as f64;
    // Moments are taken about the first decode so that identical decodes
    // give an exactly zero spread.
    let origin = decoded[0].row(0).to_owned();
    let mut shift = Array1::<f64>::zeros(vae.input_dim());
    for block in &decoded {
        shift += &(block - &origin).sum_axis(Axis(0));
    }
    shift /= n;
    let mut var = Array1::<f64>::zeros(vae.input_dim());
    for block in &decoded {
        for row in block.rows() {
            for (((s, v), o), m) in var.iter_mut().zip(row.iter()).zip(origin.iter()).zip(shift.iter()) {
                *s += (v - o - m).powi(2);
            }
        }
    }
    let mean = &origin + &shift;
    let std_field = var.iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
    Ok(FieldStats { mean_field: mean.to_vec(), mode_field: vae.decode_mean(z_mode)?.theta, std_field })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("fields must be non-empty"));
    }
    Ok(())
}

/// Overlap of `θ > threshold` regions; two empty regions score 1.
pub fn dice(est: &[f64], truth: &[f64], threshold: f64) -> Result<f64> {
    check_pair(est, truth)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (x, y) in est.iter().zip(truth) {
        let (ax, by) = (*x > threshold, *y > threshold);
        a += ax as usize;
        b += by as usize;
        inter += (ax && by) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn rmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(est, truth)?;
    Ok((est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / est.len() as f64).sqrt())
}

/// Pearson correlation.
pub fn cc(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(est, truth)?;
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(est) || constant(truth) {
        return Err(Error::UndefinedCorrelation("constant field".into()));
    }
    let n = est.len() as f64;
    let ma = est.iter().sum::<f64>() / n;
    let mb = truth.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in est.iter().zip(truth) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    pub dice: f64,
    pub rmse: f64,
    /// `None` when either field is constant.
    pub cc: Option<f64>,
}

pub fn field_metrics(est: &ExcitabilityField, truth: &ExcitabilityField) -> Result<FieldMetrics> {
    let c = match cc(&est.theta, &truth.theta) {
        Ok(v) => Some(v),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FieldMetrics { dice: dice(&est.theta, &truth.theta, DICE_THRESHOLD)?, rmse: rmse(&est.theta, &truth.theta)?, cc: c })
}

/// Euclidean norm of `a − b`.
pub fn stat_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean and (n − 1) standard deviation; the spread of one value is 0.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(n: usize, d: usize, shift: f64, seed: u64) -> Vec<LatentCode> {
        let mut r = seeded(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        shift + {
                            let x: f64 = StandardNormal.sample(&mut r);
                            x
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn repeated_value_peaks_there() {
        let s = vec![vec![0.7]; 20];
        let k = kde_fit(&s, &BandwidthRule::Silverman).unwrap();
        assert!(k.floored);
        assert!(k.density(&[0.7]) > k.density(&[0.7 + 1e-6]));
        assert!(k.density(&[0.7]) > 1e4);
    }

    #[test]
    fn kde_integrates_to_one() {
        let s = normal_samples(500, 1, 0.0, 1);
        let k = kde_fit(&s, &BandwidthRule::Silverman).unwrap();
        let b = SearchBox::new(vec![-8.0], vec![8.0]).unwrap();
        let lz = log_normalizer(&|z| k.log_density(z), &b, 2001).unwrap();
        assert!(lz.abs() < 1e-3);
    }

    #[test]
    fn kl_of_shifted_gaussians() {
        let p = normal_samples(10_000, 1, 0.0, 2);
        let ln = |m: f64| move |z: &[f64]| -0.5 * (z[0] - m).powi(2) - LN_SQRT_2PI;
        let same = kl_divergence_mc(&p, &ln(0.0), &ln(0.0)).unwrap();
        assert!(same.value.abs() < 0.02);
        let shifted = kl_divergence_mc(&p, &ln(0.0), &ln(1.0)).unwrap();
        assert!((shifted.value - 0.5).abs() < 0.05);
    }

    #[test]
    fn kl_exclusions() {
        let p = normal_samples(200, 1, 0.0, 3);
        let zero = |_: &[f64]| 0.0;
        let some_bad = |z: &[f64]| if z[0] > 2.2 { f64::NAN } else { 0.0 };
        assert!(kl_divergence_mc(&p, &zero, &some_bad).unwrap().excluded > 0);
        let many_bad = |z: &[f64]| if z[0] > 0.0 { f64::NAN } else { 0.0 };
        assert!(matches!(kl_divergence_mc(&p, &zero, &many_bad), Err(Error::TooManyExclusions { .. })));
        assert!(kl_divergence_mc(&p[..50], &zero, &zero).is_err());
    }

    #[test]
    fn z_stats_cases() {
        let mut two = vec![vec![-1.5]; 10];
        two.extend(vec![vec![1.5]; 10]);
        assert!(z_stats(&two).unwrap().mean[0].abs() < 1e-15);
        // The argmax of a Silverman KDE jitters by roughly 0.1 sigma per axis
        // at this sample size, so a narrow Gaussian keeps the check meaningful.
        let s: Vec<LatentCode> = normal_samples(3000, 2, 0.0, 4).into_iter().map(|z| z.iter().map(|v| 0.3 * v + 0.3).collect()).collect();
        let zs = z_stats(&s).unwrap();
        for k in 0..2 {
            assert!((zs.mode[k] - zs.mean[k]).abs() < 0.1);
        }
        let direct = (s.iter().map(|z| (z[1] - zs.mean[1]).powi(2)).sum::<f64>() / 2999.0).sqrt();
        assert!((zs.std[1] - direct).abs() < 1e-12);
    }

    #[test]
    fn field_metrics_trivial() {
        let truth = [0.15, 0.5, 0.5, 0.15];
        assert_eq!(dice(&truth, &truth, DICE_THRESHOLD).unwrap(), 1.0);
        assert_eq!(dice(&[0.5, 0.15, 0.15, 0.5], &truth, DICE_THRESHOLD).unwrap(), 0.0);
        assert_eq!(dice(&[0.5, 0.5, 0.15, 0.15], &truth, DICE_THRESHOLD).unwrap(), 0.5);
        assert_eq!(dice(&[0.1; 4], &[0.2; 4], DICE_THRESHOLD).unwrap(), 1.0);
        assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(cc(&truth, &truth).unwrap(), 1.0);
        assert!(matches!(cc(&[0.2; 4], &truth), Err(Error::UndefinedCorrelation(_))));
        assert!(dice(&truth[..3], &truth, 0.3).is_err());
    }

    #[test]
    fn aggregate_by_hand() {
        let (m, s) = aggregate(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(aggregate(&[7.0]), (7.0, 0.0));
    }
}
