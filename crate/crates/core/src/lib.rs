//! Bayesian active learning of posterior densities over a learned latent space.
//!
//! The crate couples a 2D Aliev-Panfilov excitation model with a variational
//! autoencoder that embeds tissue-excitability fields into a low-dimensional
//! latent space. A Gaussian-process surrogate of the latent log-posterior is
//! grown one simulation at a time, with acquisitions driven by the log-normal
//! process `exp(GP(z))`. Metropolis-Hastings samplers (plain and two-stage)
//! provide reference posteriors to compare against.
//!
//! Module map:
//!
//! * [`forward_model`]: lattice simulation, lead field, noise and likelihood.
//! * [`data_gen`]: region-growing training fields and sector test fields.
//! * [`vae`]: MLP variational autoencoder trained with Adam.
//! * [`gp`]: Matérn 5/2 GP regression and marginal-likelihood fitting.
//! * [`acquisition`]: log-normal entropy / variance and UCB acquisitions.
//! * [`active_learner`]: the active-learning loop and its convergence test.
//! * [`mcmc`]: random-walk, two-stage MH, tuning and diagnostics.
//! * [`evaluation`]: KDE, Monte-Carlo KL and field metrics.
//! * [`experiment`]: the reproducible on-disk pipeline behind the `bal` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod active_learner;
pub mod data_gen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod forward_model;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod optim;
pub mod par;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};

/// A point in the VAE latent space.
pub type LatentCode = Vec<f64>;
