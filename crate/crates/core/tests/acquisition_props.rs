use bal_core::acquisition::{
    acquisition_from_prediction, evaluate_acquisition, lognormal_entropy, lognormal_log_variance, lognormal_variance, AcquisitionKind,
};
use bal_core::gp::{gp_fit, GpTrainingSet, KernelHyperparams};
use bal_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `-E[ln p(X)]` and `Var[X]` for `X = exp(μ + σ ε)`, estimated from draws.
fn monte_carlo(mu: f64, var: f64, draws: usize, seed: u64) -> (f64, f64) {
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = seeded(seed);
    let (mut neg_log_p, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let e: f64 = normal.sample(&mut rng);
        let ln_x = mu + sd * e;
        let x = ln_x.exp();
        // ln p(x) = -ln x - ln(σ√(2π)) - (ln x - μ)² / (2σ²)
        neg_log_p += ln_x + (sd * (2.0 * std::f64::consts::PI).sqrt()).ln() + 0.5 * e * e;
        s1 += x;
        s2 += x * x;
    }
    let n = draws as f64;
    let mean = s1 / n;
    (neg_log_p / n, s2 / n - mean * mean)
}

#[test]
fn closed_forms_match_monte_carlo() {
    let mut rng = seeded(11);
    for k in 0..10 {
        let mu = rng.random_range(0.5..3.0);
        let var = rng.random_range(0.05..1.0);
        let (h_mc, v_mc) = monte_carlo(mu, var, 1_000_000, 100 + k);
        let h = lognormal_entropy(mu, var).unwrap();
        let v = lognormal_variance(mu, var).unwrap();
        assert!((h - h_mc).abs() <= 0.02 * h.abs(), "entropy ({mu}, {var}): {h} vs {h_mc}");
        assert!((v - v_mc).abs() <= 0.05 * v, "variance ({mu}, {var}): {v} vs {v_mc}");
    }
}

#[test]
fn nonpositive_variance_is_rejected() {
    assert!(lognormal_entropy(0.0, 0.0).is_err());
    assert!(lognormal_variance(0.0, -1.0).is_err());
}

#[test]
fn log_variance_stays_finite_where_variance_overflows() {
    let lv = lognormal_log_variance(400.0, 2.0).unwrap();
    assert!(lv.is_finite());
    assert_eq!(lognormal_variance(400.0, 2.0).unwrap(), f64::INFINITY);
}

proptest! {
    #[test]
    fn entropy_increases_in_mean_and_variance(mu in -50.0f64..50.0, var in 1e-6f64..20.0, dm in 1e-3f64..5.0, dv in 1e-3f64..5.0) {
        let h = lognormal_entropy(mu, var).unwrap();
        prop_assert!(lognormal_entropy(mu + dm, var).unwrap() > h);
        prop_assert!(lognormal_entropy(mu, var + dv).unwrap() > h);
    }

    #[test]
    fn variance_increases_in_mean_and_variance(mu in -50.0f64..50.0, var in 1e-6f64..20.0, dm in 1e-3f64..5.0, dv in 1e-3f64..5.0) {
        let v = lognormal_log_variance(mu, var).unwrap();
        prop_assert!(lognormal_log_variance(mu + dm, var).unwrap() > v);
        prop_assert!(lognormal_log_variance(mu, var + dv).unwrap() > v);
    }

    #[test]
    fn value_depends_only_on_the_prediction(seed in 0u64..5000, kappa in 0.1f64..5.0) {
        let mut rng = seeded(seed);
        let x: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let y: Vec<f64> = x.iter().map(|z| -(z[0] * z[0] + z[1] * z[1])).collect();
        let hp = KernelHyperparams::isotropic(3.0, 1.0, 2, 1e-6);
        let gp = gp_fit(&GpTrainingSet::from_pairs(x.clone(), y.clone()).unwrap(), &hp).unwrap();
        // The same data in reverse order defines the same GP.
        let mut xr = x.clone();
        xr.reverse();
        let mut yr = y.clone();
        yr.reverse();
        let gp_r = gp_fit(&GpTrainingSet::from_pairs(xr, yr).unwrap(), &hp).unwrap();
        let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        for kind in [AcquisitionKind::LognormalEntropy, AcquisitionKind::LognormalVariance, AcquisitionKind::Ucb { kappa }] {
            let (mu, var) = gp.predict(&z);
            let direct = evaluate_acquisition(&gp, &kind, &z);
            prop_assert_eq!(direct, acquisition_from_prediction(&kind, mu, var));
            prop_assert!((direct - evaluate_acquisition(&gp_r, &kind, &z)).abs() <= 1e-8 * (1.0 + direct.abs()));
        }
    }
}

#[test]
fn unvisited_point_beats_visited_point_at_equal_mean() {
    let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let gp = gp_fit(&GpTrainingSet::from_pairs(x, vec![0.0; 3]).unwrap(), &KernelHyperparams::isotropic(1.0, 0.5, 2, 1e-8)).unwrap();
    let (far, near) = ([3.5, -3.5], [0.0, 0.0]);
    assert!(gp.predict(&far).0.abs() < 1e-6 && gp.predict(&near).0.abs() < 1e-6);
    for kind in [AcquisitionKind::LognormalEntropy, AcquisitionKind::LognormalVariance, AcquisitionKind::Ucb { kappa: 2.0 }] {
        assert!(evaluate_acquisition(&gp, &kind, &far) > evaluate_acquisition(&gp, &kind, &near), "{kind:?}");
    }
}
