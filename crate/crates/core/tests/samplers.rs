use bal_core::mcmc::{
    gelman_rubin, mh_chain, run_reference_mcmc, run_two_stage_mcmc, tune_proposal, two_stage_mh, McmcProtocol, ProposalSpec, TuneOptions,
};
use bal_core::rng::seeded;
use bal_core::Result;
use ndarray::array;

/// `N(m, Σ)` with `m = (1, -0.5)`, `Σ = [[1, 0.6], [0.6, 0.5]]`.
fn correlated(z: &[f64]) -> Result<f64> {
    let (a, b, c) = (1.0, 0.6, 0.5);
    let det = a * c - b * b;
    let (x, y) = (z[0] - 1.0, z[1] + 0.5);
    Ok(-0.5 * (c * x * x - 2.0 * b * x * y + a * y * y) / det)
}

/// Batch-means standard error of each coordinate's mean.
fn batch_se(samples: &[Vec<f64>], k: usize) -> f64 {
    let batches = 50;
    let size = samples.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| samples[b * size..(b + 1) * size].iter().map(|s| s[k]).sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn moments(samples: &[Vec<f64>]) -> ([f64; 2], [f64; 3]) {
    let n = samples.len() as f64;
    let m = [samples.iter().map(|s| s[0]).sum::<f64>() / n, samples.iter().map(|s| s[1]).sum::<f64>() / n];
    let c = |i: usize, j: usize| samples.iter().map(|s| (s[i] - m[i]) * (s[j] - m[j])).sum::<f64>() / (n - 1.0);
    (m, [c(0, 0), c(0, 1), c(1, 1)])
}

#[test]
fn plain_mh_reproduces_a_correlated_gaussian() {
    let prop = ProposalSpec::isotropic(2, 0.9).unwrap();
    let chain = mh_chain(&correlated, &[1.0, -0.5], &prop, 200_000, &mut seeded(3)).unwrap();
    let s = &chain.samples[20_000..];
    let (m, c) = moments(s);
    for (k, truth) in [1.0, -0.5].into_iter().enumerate() {
        let se = batch_se(s, k);
        assert!((m[k] - truth).abs() <= 3.0 * se, "mean {k}: {} vs {truth} (se {se})", m[k]);
    }
    for (got, truth) in c.iter().zip([1.0, 0.6, 0.5]) {
        assert!((got - truth).abs() <= 0.05, "covariance entry {got} vs {truth}");
    }
}

#[test]
fn perfect_surrogate_gives_identical_trajectory() {
    let prop = ProposalSpec::isotropic(2, 1.3).unwrap();
    let a = mh_chain(&correlated, &[0.0, 0.0], &prop, 5_000, &mut seeded(9)).unwrap();
    let b = two_stage_mh(&correlated, &correlated, &[0.0, 0.0], &prop, 5_000, &mut seeded(9)).unwrap();
    assert_eq!(a.samples, b.chain.samples);
    assert_eq!(a.accepted, b.chain.accepted);
}

#[test]
fn biased_surrogate_keeps_the_exact_target() {
    let surrogate = |z: &[f64]| -> Result<f64> { Ok(-0.5 * ((z[0] - 0.6) * (z[0] - 0.6) / 1.8 + (z[1] + 0.2) * (z[1] + 0.2) / 0.9)) };
    let prop = ProposalSpec::isotropic(2, 1.0).unwrap();
    let n = 200_000;
    let plain = mh_chain(&correlated, &[1.0, -0.5], &prop, n, &mut seeded(21)).unwrap();
    let two = two_stage_mh(&correlated, &surrogate, &[1.0, -0.5], &prop, n, &mut seeded(22)).unwrap();
    assert!(two.exact_evaluations < n);
    let (a, b) = (&plain.samples[n / 10..], &two.chain.samples[n / 10..]);
    let (ma, _) = moments(a);
    let (mb, _) = moments(b);
    for k in 0..2 {
        let se = (batch_se(a, k).powi(2) + batch_se(b, k).powi(2)).sqrt();
        assert!((ma[k] - mb[k]).abs() <= 3.0 * se, "coordinate {k}: {} vs {} (se {se})", ma[k], mb[k]);
    }
    let second = |s: &[Vec<f64>], k: usize| s.iter().map(|v| v[k] * v[k]).sum::<f64>() / s.len() as f64;
    for k in 0..2 {
        assert!((second(a, k) - second(b, k)).abs() <= 0.05 * second(a, k).max(0.1));
    }
}

#[test]
fn tuning_lands_near_target_on_a_fresh_chain() {
    let logpdf = |z: &[f64]| -> Result<f64> { Ok(-0.5 * z.iter().map(|v| v * v).sum::<f64>()) };
    let tuned = tune_proposal(&logpdf, &[0.0, 0.0], 0.22, &TuneOptions::default(), &mut seeded(5)).unwrap();
    let check = mh_chain(&logpdf, &tuned.last_state, &tuned.proposal, 20_000, &mut seeded(6)).unwrap();
    assert!((0.17..=0.27).contains(&check.acceptance_rate), "acceptance {}", check.acceptance_rate);
}

#[test]
fn reference_protocol_counts_and_mixes() {
    let protocol = McmcProtocol { chain_length: 4_000, ..McmcProtocol::default() };
    let prop = ProposalSpec::new(array![[1.2, 0.5], [0.5, 0.7]]).unwrap();
    let inits = vec![vec![2.0, 1.0], vec![-1.0, -2.0]];
    let set = run_reference_mcmc(&correlated, &prop, &inits, &protocol, 77).unwrap();
    assert_eq!(set.samples.len(), 2 * protocol.retained_per_chain());
    assert_eq!(set.exact_evaluations, 2 * 4_001);
    let d = set.diagnostics.as_ref().unwrap();
    assert!(d.gelman_rubin.iter().all(|r| *r < 1.05), "{:?}", d.gelman_rubin);
    assert_eq!(set, run_reference_mcmc(&correlated, &prop, &inits, &protocol, 77).unwrap());

    let shifted = |z: &[f64]| correlated(&[z[0] - 0.1, z[1]]);
    let two = run_two_stage_mcmc(&correlated, &shifted, &prop, &inits, &protocol, 77).unwrap();
    assert!(two.exact_evaluations < set.exact_evaluations);
}

#[test]
fn gelman_rubin_flags_separated_chains() {
    let a: Vec<Vec<f64>> = (0..500).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
    let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 5.0]).collect();
    let gr = gelman_rubin(&[&a, &b]).unwrap();
    assert!(gr.rhat[0] > 2.0);
    let same = gelman_rubin(&[&a, &a]).unwrap();
    assert!((same.rhat[0] - 1.0).abs() < 1e-3);
}
