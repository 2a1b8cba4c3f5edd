#![allow(dead_code)]

use bal_core::rng::seeded;
use bal_core::vae::{elbo_with_noise, VaeArch, VaeModel};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Gradient-check report: worst relative error and the parameter count.
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central differences on every parameter of a miniature VAE
/// (`N = 12`, hidden 8, `d_z = 2`) with the noise held fixed.
/// Errors are relative to `max(|analytic|, |numeric|, floor)`.
pub fn vae_fd_check(decoder_variance: f64, seed: u64) -> FdReport {
    let arch = VaeArch { input_dim: 12, hidden: 8, latent_dim: 2 };
    let mut model = VaeModel::new(arch, seed).unwrap();
    let mut rng = seeded(seed + 1);
    let x = Array2::from_shape_simple_fn((3, 12), || rng.random_range(0.1..0.5));
    let eps = Array2::from_shape_simple_fn((3, 2), || rng.sample(StandardNormal));
    let analytic = elbo_with_noise(&model, &x, &eps, decoder_variance).unwrap().grads;
    let grads: Vec<Vec<f64>> = analytic.slices().into_iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let floor = 1e-6;
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (group, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = model.slices()[group][i];
            model.slices_mut()[group][i] = orig + h;
            let up = elbo_with_noise(&model, &x, &eps, decoder_variance).unwrap().loss;
            model.slices_mut()[group][i] = orig - h;
            let down = elbo_with_noise(&model, &x, &eps, decoder_variance).unwrap().loss;
            model.slices_mut()[group][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    FdReport { max_rel_err, checked }
}
