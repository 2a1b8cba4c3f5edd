//! Fully-connected variational autoencoder over excitability fields.
//!
//! Encoder: `N -> H -> H -> 2 d_z` (latent mean and log-variance), decoder:
//! `d_z -> H -> H -> N`, softplus on hidden layers. The decoder output is
//! `0.5 * sigmoid(.)`, which keeps the generated field inside `[0, 0.5]`.
//! Training minimises the negative ELBO with a unit-variance Gaussian
//! reconstruction term, a single reparameterised latent draw per datum and
//! Adam. Gradients are back-propagated by hand.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::ExcitabilityField;
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

/// Affine layer `x W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    fn glorot(n_in: usize, n_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let limit = gain * (6.0 / (n_in + n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Dense { w: Array2::from_shape_simple_fn((n_in, n_out), || dist.sample(rng)), b: Array1::zeros(n_out) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub latent_dim: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `0.5 Σ (exp(lv) + mu² - 1 - lv)`: KL from `N(mu, diag exp(lv))` to `N(0, I)`.
pub fn kl_to_prior(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

struct EncoderPass {
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

struct DecoderPass {
    g1: Array2<f64>,
    s1: Array2<f64>,
    g2: Array2<f64>,
    s2: Array2<f64>,
    xhat: Array2<f64>,
}

/// Loss and its pieces, averaged over the batch.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub loss: f64,
    pub kl: f64,
    pub reconstruction: f64,
    pub grads: VaeModel,
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden == 0 || arch.latent_dim == 0 {
            return Err(Error::invalid("VAE dimensions must be positive"));
        }
        let mut rng = rng::seeded(seed);
        let VaeArch { input_dim: n, hidden: h, latent_dim: d } = arch;
        let encoder = vec![Dense::glorot(n, h, 1.0, &mut rng), Dense::glorot(h, h, 1.0, &mut rng), Dense::glorot(h, 2 * d, 0.1, &mut rng)];
        let decoder = vec![Dense::glorot(d, h, 1.0, &mut rng), Dense::glorot(h, h, 1.0, &mut rng), Dense::glorot(h, n, 1.0, &mut rng)];
        Ok(VaeModel { encoder, decoder, latent_dim: d })
    }

    pub fn zeros(arch: VaeArch) -> Self {
        let VaeArch { input_dim: n, hidden: h, latent_dim: d } = arch;
        VaeModel {
            encoder: vec![Dense::zeros(n, h), Dense::zeros(h, h), Dense::zeros(h, 2 * d)],
            decoder: vec![Dense::zeros(d, h), Dense::zeros(h, h), Dense::zeros(h, n)],
            latent_dim: d,
        }
    }

    pub fn arch(&self) -> VaeArch {
        VaeArch { input_dim: self.encoder[0].n_in(), hidden: self.encoder[0].n_out(), latent_dim: self.latent_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].n_in()
    }

    /// Shape and finiteness check.
    pub fn validate(&self) -> Result<()> {
        let VaeArch { input_dim: n, hidden: h, latent_dim: d } = self.arch();
        let want = [(n, h), (h, h), (h, 2 * d), (d, h), (h, h), (h, n)];
        if self.encoder.len() != 3 || self.decoder.len() != 3 {
            return Err(Error::ModelCorrupt("expected three layers per network".into()));
        }
        for (layer, (i, o)) in self.encoder.iter().chain(&self.decoder).zip(want) {
            if layer.w.dim() != (i, o) || layer.b.len() != o {
                return Err(Error::ModelCorrupt(format!("layer shape {:?} expected ({i}, {o})", layer.w.dim())));
            }
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::ModelCorrupt("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Parameter blocks in a fixed order (weights then bias, encoder first).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [l.w.as_slice_mut().expect("standard layout"), l.b.as_slice_mut().expect("standard layout")])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.arch())
    }

    fn add_scaled(&mut self, other: &VaeModel, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn encode_batch(&self, x: &Array2<f64>) -> EncoderPass {
        let a1 = self.encoder[0].forward(x);
        let h1 = a1.mapv(softplus);
        let a2 = self.encoder[1].forward(&h1);
        let h2 = a2.mapv(softplus);
        let out = self.encoder[2].forward(&h2);
        EncoderPass { a1, h1, a2, h2, out }
    }

    fn decode_pass(&self, z: &Array2<f64>) -> DecoderPass {
        let g1 = self.decoder[0].forward(z);
        let s1 = g1.mapv(softplus);
        let g2 = self.decoder[1].forward(&s1);
        let s2 = g2.mapv(softplus);
        let xhat = self.decoder[2].forward(&s2).mapv(|g| 0.5 * sigmoid(g));
        DecoderPass { g1, s1, g2, s2, xhat }
    }

    /// Latent mean and log-variance for one field.
    pub fn encode(&self, theta: &ExcitabilityField) -> Result<(Vec<f64>, Vec<f64>)> {
        if theta.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), theta.len()));
        }
        let x = Array2::from_shape_vec((1, theta.len()), theta.theta.clone()).expect("row");
        let out = self.encode_batch(&x).out;
        let d = self.latent_dim;
        let mu: Vec<f64> = out.slice(s![0, ..d]).to_vec();
        let logvar: Vec<f64> = out.slice(s![0, d..]).to_vec();
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::ModelCorrupt("non-finite encoder output".into()));
        }
        Ok((mu, logvar))
    }

    /// Latent means for a batch of fields (rows of the result).
    pub fn encode_means(&self, fields: &[ExcitabilityField]) -> Result<Array2<f64>> {
        let x = stack_fields(fields, self.input_dim())?;
        let out = self.encode_batch(&x).out;
        Ok(out.slice(s![.., ..self.latent_dim]).to_owned())
    }

    /// Decoder mean `0.5 sigmoid(.)` at `z`; always inside `(0, 0.5)`.
    pub fn decode_mean(&self, z: &[f64]) -> Result<ExcitabilityField> {
        if z.len() != self.latent_dim {
            return Err(Error::dims(self.latent_dim, z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent code must be finite"));
        }
        let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let xhat = self.decode_pass(&zm).xhat;
        Ok(ExcitabilityField { theta: xhat.row(0).to_vec() })
    }

    /// Decoder means for a batch of latent codes (rows of `z`).
    pub fn decode_batch(&self, z: &Array2<f64>) -> Array2<f64> {
        self.decode_pass(z).xhat
    }
}

fn stack_fields(fields: &[ExcitabilityField], n: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((fields.len(), n));
    for (mut row, f) in x.axis_iter_mut(Axis(0)).zip(fields) {
        if f.len() != n {
            return Err(Error::dims(n, f.len()));
        }
        row.assign(&Array1::from(f.theta.clone()));
    }
    Ok(x)
}

/// Negative ELBO and its gradient for a batch `x` (rows) with fixed standard
/// normal draws `eps` (one row per datum). Averages over the batch. The
/// decoder likelihood is Gaussian with fixed variance `decoder_variance`.
pub fn elbo_with_noise(model: &VaeModel, x: &Array2<f64>, eps: &Array2<f64>, decoder_variance: f64) -> Result<ElboTerms> {
    if !(decoder_variance > 0.0 && decoder_variance.is_finite()) {
        return Err(Error::invalid("decoder_variance must be positive"));
    }
    let b = x.nrows();
    let d = model.latent_dim;
    if x.ncols() != model.input_dim() || eps.dim() != (b, d) || b == 0 {
        return Err(Error::dims(format!("({b}, {}) and ({b}, {d})", model.input_dim()), format!("{:?} and {:?}", x.dim(), eps.dim())));
    }
    let scale = 1.0 / b as f64;
    let enc = model.encode_batch(x);
    let mu = enc.out.slice(s![.., ..d]).to_owned();
    let logvar = enc.out.slice(s![.., d..]).to_owned();
    let sd = logvar.mapv(|lv| (0.5 * lv).exp());
    let z = &mu + &(&sd * eps);
    let dec = model.decode_pass(&z);

    let kl: f64 =
        (0..b).map(|i| kl_to_prior(mu.row(i).as_slice().expect("row"), logvar.row(i).as_slice().expect("row"))).sum::<f64>() * scale;
    let diff = &dec.xhat - x;
    let precision = 1.0 / decoder_variance;
    let reconstruction = 0.5 * precision * diff.iter().map(|v| v * v).sum::<f64>() * scale;
    let loss = kl + reconstruction;
    if !loss.is_finite() {
        return Err(Error::ModelCorrupt("non-finite ELBO".into()));
    }

    let mut grads = model.zeros_like();

    // Decoder: xhat = 0.5 sigmoid(g3), so dxhat/dg3 = xhat (1 - 2 xhat).
    let dg3 = &diff * &dec.xhat.mapv(|v| v * (1.0 - 2.0 * v)) * (precision * scale);
    grads.decoder[2].w = dec.s2.t().dot(&dg3);
    grads.decoder[2].b = dg3.sum_axis(Axis(0));
    let dg2 = dg3.dot(&model.decoder[2].w.t()) * &dec.g2.mapv(sigmoid);
    grads.decoder[1].w = dec.s1.t().dot(&dg2);
    grads.decoder[1].b = dg2.sum_axis(Axis(0));
    let dg1 = dg2.dot(&model.decoder[1].w.t()) * &dec.g1.mapv(sigmoid);
    grads.decoder[0].w = z.t().dot(&dg1);
    grads.decoder[0].b = dg1.sum_axis(Axis(0));
    let dz = dg1.dot(&model.decoder[0].w.t());

    // Reparameterisation path plus the closed-form KL gradient.
    let dmu = &dz + &(&mu * scale);
    let dlogvar = &dz * eps * &sd * 0.5 + &logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) * scale);
    let mut dout = Array2::zeros((b, 2 * d));
    dout.slice_mut(s![.., ..d]).assign(&dmu);
    dout.slice_mut(s![.., d..]).assign(&dlogvar);

    grads.encoder[2].w = enc.h2.t().dot(&dout);
    grads.encoder[2].b = dout.sum_axis(Axis(0));
    let da2 = dout.dot(&model.encoder[2].w.t()) * &enc.a2.mapv(sigmoid);
    grads.encoder[1].w = enc.h1.t().dot(&da2);
    grads.encoder[1].b = da2.sum_axis(Axis(0));
    let da1 = da2.dot(&model.encoder[1].w.t()) * &enc.a1.mapv(sigmoid);
    grads.encoder[0].w = x.t().dot(&da1);
    grads.encoder[0].b = da1.sum_axis(Axis(0));

    Ok(ElboTerms { loss, kl, reconstruction, grads })
}

/// Negative ELBO for one field with a fresh reparameterisation draw.
pub fn elbo_loss(model: &VaeModel, theta: &ExcitabilityField, decoder_variance: f64, rng: &mut Rng) -> Result<(f64, VaeModel)> {
    let x = stack_fields(std::slice::from_ref(theta), model.input_dim())?;
    let eps = Array2::from_shape_simple_fn((1, model.latent_dim), || StandardNormal.sample(rng));
    let t = elbo_with_noise(model, &x, &eps, decoder_variance)?;
    Ok((t.loss, t.grads))
}

/// Batch gradient computed over row chunks, dispatched per `exec` and summed
/// in chunk order.
pub fn batch_gradient(
    exec: Execution,
    model: &VaeModel,
    x: &Array2<f64>,
    eps: &Array2<f64>,
    decoder_variance: f64,
    chunk: usize,
) -> Result<(f64, VaeModel)> {
    let b = x.nrows();
    let chunk = chunk.max(1);
    let n_chunks = b.div_ceil(chunk);
    let parts = par::try_map_range(exec, n_chunks, |c| {
        let rows = s![c * chunk..((c + 1) * chunk).min(b), ..];
        let t = elbo_with_noise(model, &x.slice(rows).to_owned(), &eps.slice(rows).to_owned(), decoder_variance)?;
        Ok::<_, Error>((t.loss, t.grads, x.slice(rows).nrows()))
    })?;
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for (l, g, rows) in parts {
        let w = rows as f64 / b as f64;
        loss += w * l;
        total.add_scaled(&g, w);
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fixed variance of the Gaussian decoder likelihood.
    #[serde(default = "default_decoder_variance")]
    pub decoder_variance: f64,
    /// Rows per gradient work item. Fixed rather than derived from the
    /// thread count so results do not depend on the machine.
    #[serde(default = "default_grad_chunk")]
    pub grad_chunk: usize,
    pub seed: u64,
}

fn default_grad_chunk() -> usize {
    32
}

pub const DEFAULT_DECODER_VARIANCE: f64 = 0.01;

fn default_decoder_variance() -> f64 {
    DEFAULT_DECODER_VARIANCE
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            decoder_variance: DEFAULT_DECODER_VARIANCE,
            grad_chunk: default_grad_chunk(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.grad_chunk == 0 {
            return Err(Error::invalid("learning_rate must be > 0 and batch_size >= 1"));
        }
        if !(self.decoder_variance > 0.0 && self.decoder_variance.is_finite()) {
            return Err(Error::invalid("decoder_variance must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("bad Adam coefficients"));
        }
        Ok(())
    }
}

struct Adam {
    m: VaeModel,
    v: VaeModel,
    t: i32,
}

impl Adam {
    fn new(model: &VaeModel) -> Self {
        Adam { m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    fn step(&mut self, model: &mut VaeModel, grads: &VaeModel, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t);
        for (((p, g), m), v) in model.slices_mut().into_iter().zip(grads.slices()).zip(self.m.slices_mut()).zip(self.v.slices_mut()) {
            for i in 0..p.len() {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub model: VaeModel,
    /// Mean negative ELBO per epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch Adam on the mean negative ELBO. Deterministic per `cfg.seed`.
pub fn train_vae(dataset: &[ExcitabilityField], hidden: usize, latent_dim: usize, cfg: &TrainConfig) -> Result<TrainedVae> {
    cfg.validate()?;
    let first = dataset.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let arch = VaeArch { input_dim: first.len(), hidden, latent_dim };
    let mut model = VaeModel::new(arch, rng::derive_seed(cfg.seed, "vae-init"))?;
    let data = stack_fields(dataset, arch.input_dim)?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "vae-train"));
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let exec = Execution::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.select(Axis(0), batch);
            let eps = Array2::from_shape_simple_fn((batch.len(), latent_dim), || StandardNormal.sample(&mut rng));
            let (loss, grads) = match batch_gradient(exec, &model, &x, &eps, cfg.decoder_variance, cfg.grad_chunk) {
                Ok(r) => r,
                Err(_) => return Err(Error::TrainingDiverged { epoch }),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut model, &grads, cfg);
            epoch_loss += loss * batch.len() as f64;
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("vae epoch {epoch}: loss {mean:.5}");
        loss_history.push(mean);
    }
    model.validate().map_err(|_| Error::TrainingDiverged { epoch: cfg.epochs.saturating_sub(1) })?;
    Ok(TrainedVae { model, loss_history })
}

/// Root-mean-square reconstruction error using latent means.
pub fn reconstruction_rmse(model: &VaeModel, fields: &[ExcitabilityField]) -> Result<f64> {
    let x = stack_fields(fields, model.input_dim())?;
    let mu = model.encode_means(fields)?;
    let xhat = model.decode_batch(&mu);
    Ok(((&xhat - &x).iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: VaeArch,
    pub layer_shapes: Vec<(usize, usize)>,
    pub n_params: usize,
    pub weights_file: String,
    pub train_config: Option<TrainConfig>,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f64 parameters).
pub fn save_checkpoint(model: &VaeModel, cfg: Option<&TrainConfig>, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights_file = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        arch: model.arch(),
        layer_shapes: model.encoder.iter().chain(&model.decoder).map(|l| l.w.dim()).collect(),
        n_params: model.n_params(),
        weights_file: weights_file.clone(),
        train_config: cfg.copied(),
    };
    let mut bytes = Vec::with_capacity(8 * manifest.n_params);
    for s in model.slices() {
        for v in s {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join(&weights_file);
    fs::write(&bin, bytes).map_err(|e| Error::io(bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(json, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(VaeModel, CheckpointManifest)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bin = dir.join(&manifest.weights_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut model = VaeModel::zeros(manifest.arch);
    if bytes.len() != 8 * model.n_params() || manifest.n_params != model.n_params() {
        return Err(Error::ModelCorrupt(format!("weights file has {} bytes, expected {}", bytes.len(), 8 * model.n_params())));
    }
    let mut chunks = bytes.chunks_exact(8);
    for s in model.slices_mut() {
        for v in s.iter_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    model.validate()?;
    Ok((model, manifest))
}
