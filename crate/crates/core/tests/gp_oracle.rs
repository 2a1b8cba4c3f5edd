use bal_core::gp::{gp_fit, gp_predict, log_marginal_likelihood, GpTrainingSet, KernelHyperparams};
use bal_core::rng::seeded;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

/// Matérn 5/2 written out from `r = ‖a - b‖ / ℓ` per axis.
fn matern_oracle(a: &[f64], b: &[f64], amp: f64, ls: &[f64]) -> f64 {
    let r = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum::<f64>().sqrt();
    let t = 5f64.sqrt() * r;
    amp * (1.0 + t + t * t / 3.0) * (-t).exp()
}

struct Oracle {
    kinv: DMatrix<f64>,
    y: DVector<f64>,
    x: Vec<Vec<f64>>,
    amp: f64,
    ls: Vec<f64>,
}

impl Oracle {
    fn new(x: &[Vec<f64>], y: &[f64], hp: &KernelHyperparams) -> Self {
        let ls = hp.lengthscales();
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| matern_oracle(&x[i], &x[j], hp.amplitude2, &ls) + if i == j { hp.noise_var } else { 0.0 });
        Oracle { kinv: k.try_inverse().expect("invertible"), y: DVector::from_column_slice(y), x: x.to_vec(), amp: hp.amplitude2, ls }
    }

    fn predict(&self, z: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern_oracle(xi, z, self.amp, &self.ls)));
        let mu = (k.transpose() * &self.kinv * &self.y)[0];
        let var = self.amp - (k.transpose() * &self.kinv * &k)[0];
        (mu, var)
    }

    fn lml(&self) -> f64 {
        let n = self.x.len() as f64;
        let det = self.kinv.determinant();
        -0.5 * (self.y.transpose() * &self.kinv * &self.y)[0] + 0.5 * det.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn random_set(rng: &mut impl Rng, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
    let y = x.iter().map(|z| -0.5 * (z[0] * z[0] + 2.0 * z[1] * z[1]) + (3.0 * z[0]).sin()).collect();
    (x, y)
}

#[test]
fn predictions_match_dense_inverse() {
    let mut rng = seeded(42);
    for trial in 0..20 {
        let n = rng.random_range(3..=30);
        let (x, y) = random_set(&mut rng, n);
        let hp = KernelHyperparams {
            amplitude2: rng.random_range(0.5..5.0),
            inv_lengthscale2: vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)],
            noise_var: rng.random_range(1e-4..1e-2),
        };
        let gp = gp_fit(&GpTrainingSet::from_pairs(x.clone(), y.clone()).unwrap(), &hp).unwrap();
        let oracle = Oracle::new(&x, &y, &hp);
        for _ in 0..25 {
            let z = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let (mu, var) = gp.predict_raw(&z);
            let (mu_o, var_o) = oracle.predict(&z);
            assert!((mu - mu_o).abs() <= 1e-8, "trial {trial}: mean {mu} vs {mu_o}");
            assert!((var - var_o).abs() <= 1e-8, "trial {trial}: var {var} vs {var_o}");
            assert!(var >= -1e-8);
            assert_eq!(gp_predict(&gp, &z).0, mu);
        }
        let lml = log_marginal_likelihood(&gp.training, &hp).unwrap();
        assert!((lml - oracle.lml()).abs() <= 1e-6 * (1.0 + lml.abs()), "trial {trial}: lml {lml} vs {}", oracle.lml());
    }
}

#[test]
fn refit_after_append_equals_fit_from_scratch() {
    let mut rng = seeded(7);
    let (x, y) = random_set(&mut rng, 16);
    let hp = KernelHyperparams::isotropic(2.0, 1.2, 2, 1e-6);
    let mut grown = GpTrainingSet::from_pairs(x[..10].to_vec(), y[..10].to_vec()).unwrap();
    let _ = gp_fit(&grown, &hp).unwrap();
    for i in 10..16 {
        grown.push(x[i].clone(), y[i]).unwrap();
    }
    let a = gp_fit(&grown, &hp).unwrap();
    let b = gp_fit(&GpTrainingSet::from_pairs(x, y).unwrap(), &hp).unwrap();
    for k in 0..50 {
        let z = [-4.0 + 0.16 * k as f64, 3.0 - 0.1 * k as f64];
        let (pa, pb) = (a.predict(&z), b.predict(&z));
        assert!((pa.0 - pb.0).abs() <= 1e-9 && (pa.1 - pb.1).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn interpolates_in_the_noise_free_limit(seed in 0u64..10_000, n in 2usize..25) {
        let mut rng = seeded(seed);
        let (x, y) = random_set(&mut rng, n);
        let hp = KernelHyperparams::isotropic(4.0, 1.0, 2, 1e-10);
        let gp = gp_fit(&GpTrainingSet::from_pairs(x.clone(), y.clone()).unwrap(), &hp).unwrap();
        prop_assert!(gp.chol.jitter <= 1e-4 * hp.amplitude2);
        if gp.chol.jitter == 0.0 {
            for (xi, yi) in x.iter().zip(&y) {
                prop_assert!((gp.predict(xi).0 - yi).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn variance_bounded_by_prior(seed in 0u64..10_000, zx in -6.0f64..6.0, zy in -6.0f64..6.0) {
        let mut rng = seeded(seed);
        let (x, y) = random_set(&mut rng, 12);
        let hp = KernelHyperparams::isotropic(1.5, 0.8, 2, 1e-6);
        let gp = gp_fit(&GpTrainingSet::from_pairs(x, y).unwrap(), &hp).unwrap();
        let (_, raw) = gp.predict_raw(&[zx, zy]);
        let (_, var) = gp.predict(&[zx, zy]);
        prop_assert!(raw >= -1e-8);
        prop_assert!(var >= 0.0 && var <= hp.amplitude2 + 1e-12);
    }
}
