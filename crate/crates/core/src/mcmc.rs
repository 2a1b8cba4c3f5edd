//! Random-walk Metropolis-Hastings, two-stage (delayed-acceptance) MH,
//! proposal-scale tuning and convergence diagnostics.
//!
//! Every sampler consumes its random stream in the same order: `d` standard
//! normals for the proposal, then one uniform only when the acceptance ratio
//! is below one. With a surrogate identical to the exact density the
//! two-stage sampler therefore reproduces plain MH draw for draw.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::LatentCode;

/// Log-density callable shared across chains.
pub type LogPdf<'a> = dyn Fn(&[f64]) -> Result<f64> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub covariance: Array2<f64>,
    #[serde(skip)]
    chol: Option<Array2<f64>>,
}

impl ProposalSpec {
    pub fn new(covariance: Array2<f64>) -> Result<Self> {
        let n = covariance.nrows();
        if covariance.ncols() != n || n == 0 {
            return Err(Error::dims("square matrix", format!("{:?}", covariance.dim())));
        }
        for i in 0..n {
            for j in 0..i {
                if (covariance[[i, j]] - covariance[[j, i]]).abs() > 1e-12 * covariance[[i, j]].abs().max(1.0) {
                    return Err(Error::invalid("proposal covariance must be symmetric"));
                }
            }
        }
        let chol = cholesky(&covariance).ok_or_else(|| Error::invalid("proposal covariance must be positive definite"))?;
        Ok(ProposalSpec { covariance, chol: Some(chol) })
    }

    /// `scale² I`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        Self::new(Array2::eye(dim) * (scale * scale))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    fn factor(&self) -> Array2<f64> {
        self.chol.clone().unwrap_or_else(|| cholesky(&self.covariance).expect("validated at construction"))
    }

    /// Isotropic scale `sqrt(mean diagonal)`.
    pub fn scale(&self) -> f64 {
        (self.covariance.diag().sum() / self.dim() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    /// State after each step (the initial point is not included).
    pub samples: Vec<LatentCode>,
    pub log_density: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

impl ChainResult {
    fn from_parts(samples: Vec<LatentCode>, log_density: Vec<f64>, accepted: Vec<bool>) -> Self {
        let rate = if accepted.is_empty() { 0.0 } else { accepted.iter().filter(|&&a| a).count() as f64 / accepted.len() as f64 };
        ChainResult { samples, log_density, accepted, acceptance_rate: rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn propose(z: &[f64], chol: &Array2<f64>, rng: &mut Rng) -> LatentCode {
    let d = z.len();
    let eps: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let step = chol.dot(&eps);
    z.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
}

/// Metropolis test that only draws a uniform when `log_ratio < 0`.
fn accept(log_ratio: f64, rng: &mut Rng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Random-walk Metropolis with Gaussian increments drawn from `prop`.
pub fn mh_chain(logpdf: &LogPdf, init: &[f64], prop: &ProposalSpec, n: usize, rng: &mut Rng) -> Result<ChainResult> {
    if n == 0 {
        return Err(Error::invalid("chain length must be >= 1"));
    }
    if init.len() != prop.dim() {
        return Err(Error::dims(prop.dim(), init.len()));
    }
    let mut lp = logpdf(init)?;
    if !lp.is_finite() {
        return Err(Error::invalid(format!("log-density at the initial point is {lp}")));
    }
    let chol = prop.factor();
    let mut z = init.to_vec();
    let (mut samples, mut trace, mut accepted) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let cand = propose(&z, &chol, rng);
        let lp_cand = finite_or_neg_inf(logpdf(&cand)?);
        let ok = accept(lp_cand - lp, rng);
        if ok {
            z = cand;
            lp = lp_cand;
        }
        samples.push(z.clone());
        trace.push(lp);
        accepted.push(ok);
    }
    Ok(ChainResult::from_parts(samples, trace, accepted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub chain: ChainResult,
    /// Exact-density evaluations made for proposals that passed stage one.
    pub exact_evaluations: usize,
    pub stage1_acceptance: f64,
}

/// Delayed-acceptance MH: the surrogate screens proposals, and only stage-one
/// survivors are evaluated exactly and corrected with
/// `min(1, π(z') π̃(z) / (π(z) π̃(z')))`.
pub fn two_stage_mh(
    logpdf_exact: &LogPdf,
    logpdf_surrogate: &LogPdf,
    init: &[f64],
    prop: &ProposalSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<TwoStageResult> {
    if n == 0 {
        return Err(Error::invalid("chain length must be >= 1"));
    }
    if init.len() != prop.dim() {
        return Err(Error::dims(prop.dim(), init.len()));
    }
    let mut lp = logpdf_exact(init)?;
    let mut ls = logpdf_surrogate(init)?;
    if !lp.is_finite() || !ls.is_finite() {
        return Err(Error::invalid("log-densities at the initial point must be finite"));
    }
    let chol = prop.factor();
    let mut z = init.to_vec();
    let (mut samples, mut trace, mut accepted) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut exact = 0;
    let mut stage1 = 0;
    for _ in 0..n {
        let cand = propose(&z, &chol, rng);
        let ls_cand = finite_or_neg_inf(logpdf_surrogate(&cand)?);
        let mut ok = false;
        if accept(ls_cand - ls, rng) {
            stage1 += 1;
            exact += 1;
            let lp_cand = finite_or_neg_inf(logpdf_exact(&cand)?);
            let correction = (lp_cand - ls_cand) - (lp - ls);
            if accept(correction, rng) {
                z = cand;
                lp = lp_cand;
                ls = ls_cand;
                ok = true;
            }
        }
        samples.push(z.clone());
        trace.push(lp);
        accepted.push(ok);
    }
    Ok(TwoStageResult {
        chain: ChainResult::from_parts(samples, trace, accepted),
        exact_evaluations: exact,
        stage1_acceptance: stage1 as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub pilot_length: usize,
    pub max_pilots: usize,
    pub tolerance: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions { pilot_length: 500, max_pilots: 20, tolerance: 0.05, min_scale: 1e-4, max_scale: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub proposal: ProposalSpec,
    pub pilot_acceptance: f64,
    pub pilots: usize,
    /// Last state of the final pilot chain.
    pub last_state: LatentCode,
}

/// Bisects an isotropic proposal scale (in log space) on short pilot chains
/// until the pilot acceptance rate is within `tolerance` of `target_rate`.
/// Each pilot starts where the previous one ended.
pub fn tune_proposal(logpdf_cheap: &LogPdf, init: &[f64], target_rate: f64, opts: &TuneOptions, rng: &mut Rng) -> Result<TuneResult> {
    if !(0.0 < target_rate && target_rate < 1.0) {
        return Err(Error::invalid("target acceptance rate must lie in (0, 1)"));
    }
    let dim = init.len();
    let (mut lo, mut hi) = (opts.min_scale.ln(), opts.max_scale.ln());
    let mut state = init.to_vec();
    let mut best: Option<(f64, f64)> = None;
    let mut pilots = 0;
    for _ in 0..opts.max_pilots.max(1) {
        let log_s = 0.5 * (lo + hi);
        let prop = ProposalSpec::isotropic(dim, log_s.exp())?;
        let chain = mh_chain(logpdf_cheap, &state, &prop, opts.pilot_length, rng)?;
        pilots += 1;
        let acc = chain.acceptance_rate;
        state = chain.samples.last().cloned().unwrap_or(state);
        if best.is_none_or(|(_, a)| (acc - target_rate).abs() < (a - target_rate).abs()) {
            best = Some((log_s, acc));
        }
        if (acc - target_rate).abs() <= opts.tolerance {
            break;
        }
        if acc > target_rate {
            lo = log_s;
        } else {
            hi = log_s;
        }
    }
    let (log_s, acc) = best.expect("at least one pilot");
    Ok(TuneResult { proposal: ProposalSpec::isotropic(dim, log_s.exp())?, pilot_acceptance: acc, pilots, last_state: state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelmanRubin {
    pub rhat: Vec<f64>,
    /// Zero within-chain variance in some dimension, or identical chains.
    pub degenerate: bool,
}

/// Between/within-chain potential scale reduction per dimension. Values that
/// sampling noise pushes below one are reported as one.
pub fn gelman_rubin(chains: &[&[LatentCode]]) -> Result<GelmanRubin> {
    if chains.len() < 2 {
        return Err(Error::invalid("Gelman-Rubin needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("chains must have equal length >= 10"));
    }
    let m = chains.len() as f64;
    let d = chains[0][0].len();
    let identical = chains.windows(2).all(|w| w[0] == w[1]);
    let mut degenerate = identical;
    let rhat = (0..d)
        .map(|k| {
            let means: Vec<f64> = chains.iter().map(|c| c.iter().map(|z| z[k]).sum::<f64>() / n as f64).collect();
            let vars: Vec<f64> =
                chains.iter().zip(&means).map(|(c, mu)| c.iter().map(|z| (z[k] - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0)).collect();
            let w = vars.iter().sum::<f64>() / m;
            let grand = means.iter().sum::<f64>() / m;
            let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
            if !(w > 0.0) {
                degenerate = true;
                return if b_over_n > 0.0 { f64::INFINITY } else { 1.0 };
            }
            let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
            (var_plus / w).sqrt().max(1.0)
        })
        .collect();
    Ok(GelmanRubin { rhat, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geweke {
    pub z: Vec<f64>,
    pub degenerate: Vec<bool>,
}

fn batch_means_var_of_mean(x: &[f64]) -> f64 {
    let len = x.len();
    let size = (len as f64).cbrt().ceil().max(1.0) as usize;
    let means: Vec<f64> = x.chunks_exact(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let b = means.len();
    if b < 2 {
        let mu = x.iter().sum::<f64>() / len as f64;
        return x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / ((len - 1).max(1) * len) as f64;
    }
    let mu = means.iter().sum::<f64>() / b as f64;
    means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / ((b - 1) * b) as f64
}

/// Compares the means of the first 10% and last 50% of the chain, with
/// batch-means variance estimates for each segment.
pub fn geweke(chain: &[LatentCode]) -> Result<Geweke> {
    let n = chain.len();
    if n < 100 {
        return Err(Error::invalid("Geweke diagnostic needs at least 100 samples"));
    }
    let d = chain[0].len();
    let first = n / 10;
    let last_start = n - n / 2;
    let mut z = Vec::with_capacity(d);
    let mut degenerate = Vec::with_capacity(d);
    for k in 0..d {
        let a: Vec<f64> = chain[..first].iter().map(|s| s[k]).collect();
        let b: Vec<f64> = chain[last_start..].iter().map(|s| s[k]).collect();
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let v = batch_means_var_of_mean(&a) + batch_means_var_of_mean(&b);
        if !(v > 0.0) {
            z.push(0.0);
            degenerate.push(true);
        } else {
            z.push((ma - mb) / v.sqrt());
            degenerate.push(false);
        }
    }
    Ok(Geweke { z, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcProtocol {
    pub n_chains: usize,
    pub chain_length: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub target_acceptance: f64,
}

impl Default for McmcProtocol {
    fn default() -> Self {
        McmcProtocol { n_chains: 2, chain_length: 10_000, burn_in_fraction: 0.2, thin: 2, target_acceptance: 0.22 }
    }
}

impl McmcProtocol {
    pub fn retained_per_chain(&self) -> usize {
        let burn = (self.chain_length as f64 * self.burn_in_fraction).round() as usize;
        (self.chain_length - burn).div_ceil(self.thin.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub gelman_rubin: Vec<f64>,
    pub gelman_rubin_degenerate: bool,
    /// Geweke z-scores, one vector per chain.
    pub geweke: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<LatentCode>,
    pub acceptance_rates: Vec<f64>,
    pub chain_seeds: Vec<u64>,
    pub diagnostics: Option<Diagnostics>,
    /// Expensive-density evaluations spent producing these samples.
    pub exact_evaluations: usize,
}

impl SampleSet {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    /// One sample per line, comma separated, with a `z0,z1,...` header.
    pub fn to_csv(&self) -> String {
        let mut out: Vec<String> = vec![(0..self.dim()).map(|k| format!("z{k}")).collect::<Vec<_>>().join(",")];
        out.extend(self.samples.iter().map(|s| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")));
        out.join("\n") + "\n"
    }

    pub fn samples_from_csv(text: &str) -> Result<Vec<LatentCode>> {
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))).collect())
            .collect()
    }
}

fn post_process(chains: &[ChainResult], protocol: &McmcProtocol) -> Result<(Vec<LatentCode>, Diagnostics)> {
    let burn = (protocol.chain_length as f64 * protocol.burn_in_fraction).round() as usize;
    let kept: Vec<&[LatentCode]> = chains.iter().map(|c| &c.samples[burn.min(c.len())..]).collect();
    let mut samples = Vec::new();
    for c in &kept {
        samples.extend(c.iter().step_by(protocol.thin.max(1)).cloned());
    }
    let (gr, degenerate) = match gelman_rubin(&kept) {
        Ok(g) => (g.rhat, g.degenerate),
        Err(_) => (Vec::new(), true),
    };
    let gw = kept.iter().map(|c| geweke(c).map(|g| g.z).unwrap_or_default()).collect();
    Ok((samples, Diagnostics { gelman_rubin: gr, gelman_rubin_degenerate: degenerate, geweke: gw }))
}

/// Runs one chain per initial point (concurrently), discards burn-in, keeps
/// every `thin`-th sample and pools the chains.
pub fn run_reference_mcmc(
    logpdf: &LogPdf,
    prop: &ProposalSpec,
    inits: &[LatentCode],
    protocol: &McmcProtocol,
    seed: u64,
) -> Result<SampleSet> {
    if inits.len() != protocol.n_chains || inits.is_empty() {
        return Err(Error::dims(protocol.n_chains, inits.len()));
    }
    let seeds: Vec<u64> = (0..inits.len()).map(|i| rng::derive_seed(seed, &format!("chain-{i}"))).collect();
    let chains = par::try_map_range(Execution::default(), inits.len(), |i| {
        mh_chain(logpdf, &inits[i], prop, protocol.chain_length, &mut rng::seeded(seeds[i]))
    })?;
    let (samples, diagnostics) = post_process(&chains, protocol)?;
    Ok(SampleSet {
        samples,
        acceptance_rates: chains.iter().map(|c| c.acceptance_rate).collect(),
        chain_seeds: seeds,
        diagnostics: Some(diagnostics),
        exact_evaluations: chains.len() * (protocol.chain_length + 1),
    })
}

/// Two-stage counterpart of [`run_reference_mcmc`].
pub fn run_two_stage_mcmc(
    logpdf_exact: &LogPdf,
    logpdf_surrogate: &LogPdf,
    prop: &ProposalSpec,
    inits: &[LatentCode],
    protocol: &McmcProtocol,
    seed: u64,
) -> Result<SampleSet> {
    if inits.len() != protocol.n_chains || inits.is_empty() {
        return Err(Error::dims(protocol.n_chains, inits.len()));
    }
    let seeds: Vec<u64> = (0..inits.len()).map(|i| rng::derive_seed(seed, &format!("chain-{i}"))).collect();
    let runs = par::try_map_range(Execution::default(), inits.len(), |i| {
        two_stage_mh(logpdf_exact, logpdf_surrogate, &inits[i], prop, protocol.chain_length, &mut rng::seeded(seeds[i]))
    })?;
    let chains: Vec<ChainResult> = runs.iter().map(|r| r.chain.clone()).collect();
    let (samples, diagnostics) = post_process(&chains, protocol)?;
    Ok(SampleSet {
        samples,
        acceptance_rates: chains.iter().map(|c| c.acceptance_rate).collect(),
        chain_seeds: seeds,
        diagnostics: Some(diagnostics),
        exact_evaluations: runs.iter().map(|r| r.exact_evaluations + 1).sum(),
    })
}
