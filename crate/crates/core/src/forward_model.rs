//! Two-variable Aliev-Panfilov excitation on a 2D lattice, the linear lead-field
//! measurement map, measurement noise and the Gaussian log-likelihood.

use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

/// Rectangular lattice with 4-neighbour connectivity. Node `(ix, iy)` has
/// index `iy * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, h: f64) -> Result<Self> {
        let g = GridGeometry { nx, ny, h };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::invalid(format!("grid must be at least 4x4, got {}x{}", self.nx, self.ny)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid("node spacing must be positive"));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node % self.nx, node / self.nx)
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Lattice neighbours of `node` (2 to 4 of them).
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (ix, iy) = self.coords(node);
        let left = (ix > 0).then(|| node - 1);
        let right = (ix + 1 < self.nx).then(|| node + 1);
        let down = (iy > 0).then(|| node - self.nx);
        let up = (iy + 1 < self.ny).then(|| node + self.nx);
        [left, right, down, up].into_iter().flatten()
    }

    /// Breadth-first hop distance from `source` to every node.
    pub fn bfs_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_nodes()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(n) = queue.pop_front() {
            for m in self.neighbors(n) {
                if dist[m] == usize::MAX {
                    dist[m] = dist[n] + 1;
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    /// Geometric centre in lattice units.
    pub fn center(&self) -> (f64, f64) {
        ((self.nx as f64 - 1.0) * 0.5 * self.h, (self.ny as f64 - 1.0) * 0.5 * self.h)
    }

    pub fn center_node(&self) -> usize {
        self.index(self.nx / 2, self.ny / 2)
    }
}

/// Aliev-Panfilov coefficients and integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApParams {
    pub c: f64,
    pub e0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub d_iso: f64,
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams { c: 8.0, e0: 0.002, mu1: 0.2, mu2: 0.3, d_iso: 0.1, dt: 0.05, t_end: 60.0, record_stride: 4 }
    }
}

impl ApParams {
    /// Checks positivity and the explicit-Euler diffusion bound `dt <= h^2 / (4 d)`.
    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        let coeffs = [("c", self.c), ("e0", self.e0), ("mu1", self.mu1), ("mu2", self.mu2), ("d_iso", self.d_iso)];
        for (name, v) in coeffs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::invalid("dt and t_end must be positive"));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride must be >= 1"));
        }
        let bound = geom.h * geom.h / (4.0 * self.d_iso);
        if self.dt > bound {
            return Err(Error::invalid(format!("dt = {} exceeds stability bound {bound}", self.dt)));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn n_frames(&self) -> usize {
        self.n_steps() / self.record_stride + 1
    }
}

/// Tissue excitability per node; every entry lies in `[0, 0.5]` (plus the
/// small uniform noise carried by generated fields).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitabilityField {
    pub theta: Vec<f64>,
}

/// Upper edge of generated fields: prior bound plus the U[0, 0.001] noise band.
pub const THETA_MAX: f64 = 0.501;

impl ExcitabilityField {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(bad) = theta.iter().find(|t| !(0.0..=THETA_MAX).contains(*t)) {
            return Err(Error::invalid(format!("excitability {bad} outside [0, {THETA_MAX}]")));
        }
        Ok(ExcitabilityField { theta })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SimState {
    pub fn rest(n: usize) -> Self {
        SimState { u: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Instantaneous patch stimulus: `u = value` on every node within `radius`
/// lattice hops of `site`, applied at `t_on`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    pub site: usize,
    pub radius: usize,
    pub value: f64,
    pub t_on: f64,
}

impl StimulusProtocol {
    pub fn centered(geom: &GridGeometry) -> Self {
        StimulusProtocol { site: geom.center_node(), radius: 1, value: 1.0, t_on: 0.0 }
    }

    /// A protocol that never perturbs the tissue.
    pub fn none() -> Self {
        StimulusProtocol { site: 0, radius: 0, value: 0.0, t_on: 0.0 }
    }

    fn validate(&self, geom: &GridGeometry) -> Result<()> {
        if self.site >= geom.n_nodes() {
            return Err(Error::invalid(format!("stimulus site {} out of range", self.site)));
        }
        if !(0.0..=1.0).contains(&self.value) || !self.t_on.is_finite() || self.t_on < 0.0 {
            return Err(Error::invalid("stimulus value must lie in [0, 1] and t_on >= 0"));
        }
        Ok(())
    }
}

/// Recorded transmembrane potential, one row per frame.
pub type UFrames = Array2<f64>;

/// Validated (geometry, parameters) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    geom: GridGeometry,
    params: ApParams,
    neighbor_table: Vec<[u32; 4]>,
    neighbor_count: Vec<u8>,
}

impl Simulator {
    pub fn new(geom: GridGeometry, params: ApParams) -> Result<Self> {
        geom.validate()?;
        params.validate(&geom)?;
        let n = geom.n_nodes();
        let mut neighbor_table = vec![[0u32; 4]; n];
        let mut neighbor_count = vec![0u8; n];
        for node in 0..n {
            for (k, m) in geom.neighbors(node).enumerate() {
                neighbor_table[node][k] = m as u32;
                neighbor_count[node] = (k + 1) as u8;
            }
        }
        Ok(Simulator { geom, params, neighbor_table, neighbor_count })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn params(&self) -> &ApParams {
        &self.params
    }

    /// Integrates from the rest state and returns `u` every `record_stride` steps,
    /// starting with the frame at `t = 0` (after any stimulus scheduled there).
    pub fn simulate(&self, theta: &ExcitabilityField, stim: &StimulusProtocol) -> Result<UFrames> {
        self.simulate_from(theta, stim, SimState::rest(self.geom.n_nodes()))
    }

    pub fn simulate_from(&self, theta: &ExcitabilityField, stim: &StimulusProtocol, init: SimState) -> Result<UFrames> {
        let n = self.geom.n_nodes();
        if theta.len() != n {
            return Err(Error::dims(n, theta.len()));
        }
        if init.u.len() != n || init.v.len() != n {
            return Err(Error::dims(n, init.u.len().min(init.v.len())));
        }
        stim.validate(&self.geom)?;
        let p = self.params;
        let n_steps = p.n_steps();
        let stim_step = (stim.t_on / p.dt).round() as usize;
        let stim_nodes: Vec<usize> = if stim.value > 0.0 {
            let dist = self.geom.bfs_distances(stim.site);
            (0..n).filter(|&i| dist[i] <= stim.radius).collect()
        } else {
            Vec::new()
        };
        let diff = p.d_iso / (self.geom.h * self.geom.h);
        let th = &theta.theta;

        let SimState { mut u, mut v } = init;
        let mut u_next = vec![0.0; n];
        let mut frames = Array2::zeros((p.n_frames(), n));
        let mut frame = 0;

        for step in 0..=n_steps {
            if step == stim_step {
                for &i in &stim_nodes {
                    u[i] = stim.value;
                }
            }
            if step % p.record_stride == 0 {
                if u.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericalInstability { step, detail: "non-finite transmembrane potential".into() });
                }
                frames.row_mut(frame).assign(&ArrayView1::from(&u[..]));
                frame += 1;
            }
            if step == n_steps {
                break;
            }
            for i in 0..n {
                let ui = u[i];
                let vi = v[i];
                let nbrs = &self.neighbor_table[i][..self.neighbor_count[i] as usize];
                // Zero-flux boundary: missing neighbours contribute no flux.
                let mut lap = 0.0;
                for &m in nbrs {
                    lap += u[m as usize] - ui;
                }
                let reaction = -p.c * ui * (ui - th[i]) * (ui - 1.0) - ui * vi;
                let eps = p.e0 + p.mu1 * vi / (ui + p.mu2);
                let dv = eps * (-vi - p.c * ui * (ui - th[i] - 1.0));
                u_next[i] = ui + p.dt * (diff * lap + reaction);
                v[i] = vi + p.dt * dv;
            }
            std::mem::swap(&mut u, &mut u_next);
            if !u[0].is_finite() || !v[0].is_finite() {
                return Err(Error::NumericalInstability { step: step + 1, detail: "state diverged".into() });
            }
        }
        Ok(frames)
    }

    /// Simulates several fields with the same stimulus.
    pub fn simulate_batch(&self, exec: Execution, thetas: &[ExcitabilityField], stim: &StimulusProtocol) -> Result<Vec<UFrames>> {
        par::map_slice(exec, thetas, |t| self.simulate(t, stim)).into_iter().collect()
    }
}

/// Free-function form of [`Simulator::simulate`].
pub fn simulate_ap(geom: &GridGeometry, theta: &ExcitabilityField, params: &ApParams, stim: &StimulusProtocol) -> Result<UFrames> {
    Simulator::new(*geom, *params)?.simulate(theta, stim)
}

/// First recorded frame index at which `u > level`, per node.
pub fn activation_frames(frames: &UFrames, level: f64) -> Vec<Option<usize>> {
    let n = frames.ncols();
    (0..n).map(|i| frames.column(i).iter().position(|&u| u > level)).collect()
}

/// Linear map from node potentials to `L` leads. Rows have unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadField {
    pub h: Array2<f64>,
}

impl LeadField {
    pub fn new(h: Array2<f64>) -> Result<Self> {
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("lead field has non-finite entries"));
        }
        Ok(LeadField { h })
    }

    pub fn n_leads(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.h.ncols()
    }
}

/// Lead-by-frame measurements (`L x T_rec`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSeries {
    pub y: Array2<f64>,
}

impl MeasurementSeries {
    pub fn n_leads(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.y.ncols()
    }

    /// Mean squared entry.
    pub fn power(&self) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        self.y.iter().map(|x| x * x).sum::<f64>() / self.y.len() as f64
    }
}

/// Electrodes evenly spaced on a circle around the lattice with a seeded
/// angular offset; weights are inverse electrode-to-node distances.
pub fn build_lead_field(geom: &GridGeometry, n_leads: usize, seed: u64) -> Result<LeadField> {
    if n_leads == 0 {
        return Err(Error::invalid("n_leads must be >= 1"));
    }
    let mut rng = rng::seeded(seed);
    let (cx, cy) = geom.center();
    let w = (geom.nx as f64 - 1.0) * geom.h;
    let hgt = (geom.ny as f64 - 1.0) * geom.h;
    let radius = 0.5 * (w * w + hgt * hgt).sqrt() + 2.0 * geom.h;
    let offset: f64 = rng.random::<f64>() * 2.0 * PI;
    let n = geom.n_nodes();
    let mut h = Array2::zeros((n_leads, n));
    for (l, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
        let jitter: f64 = (rng.random::<f64>() - 0.5) * PI / n_leads as f64;
        let angle = offset + jitter + 2.0 * PI * l as f64 / n_leads as f64;
        let (ex, ey) = (cx + radius * angle.cos(), cy + radius * angle.sin());
        for (node, w) in row.iter_mut().enumerate() {
            let (ix, iy) = geom.coords(node);
            let dx = ix as f64 * geom.h - ex;
            let dy = iy as f64 * geom.h - ey;
            *w = 1.0 / (dx * dx + dy * dy).sqrt();
        }
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    LeadField::new(h)
}

/// `Y[:, k] = H u_k` for every recorded frame.
pub fn apply_lead_field(lead: &LeadField, frames: &UFrames) -> Result<MeasurementSeries> {
    if frames.ncols() != lead.n_nodes() {
        return Err(Error::dims(format!("{} columns", lead.n_nodes()), format!("{} columns", frames.ncols())));
    }
    Ok(MeasurementSeries { y: lead.h.dot(&frames.t()) })
}

/// Adds i.i.d. Gaussian noise at the requested signal-to-noise ratio, where
/// the signal power is the mean squared entry of `y`.
pub fn add_measurement_noise(y: &MeasurementSeries, snr_db: f64, rng: &mut Rng) -> MeasurementSeries {
    let sd = noise_std_for_snr(y, snr_db);
    if sd == 0.0 || !sd.is_finite() {
        return y.clone();
    }
    let normal = Normal::new(0.0, sd).expect("finite positive sd");
    MeasurementSeries { y: y.y.mapv(|v| v + normal.sample(rng)) }
}

/// Noise standard deviation implied by `snr_db` for this signal.
pub fn noise_std_for_snr(y: &MeasurementSeries, snr_db: f64) -> f64 {
    (y.power() / 10f64.powf(snr_db / 10.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    pub sigma_e: f64,
}

impl LikelihoodConfig {
    pub fn new(sigma_e: f64) -> Result<Self> {
        if !(sigma_e > 0.0 && sigma_e.is_finite()) {
            return Err(Error::invalid(format!("sigma_e must be positive, got {sigma_e}")));
        }
        Ok(LikelihoodConfig { sigma_e })
    }
}

/// Squared Frobenius distance between two measurement series.
pub fn squared_residual(y_obs: &MeasurementSeries, y_sim: &MeasurementSeries) -> Result<f64> {
    if y_obs.y.dim() != y_sim.y.dim() {
        return Err(Error::dims(format!("{:?}", y_obs.y.dim()), format!("{:?}", y_sim.y.dim())));
    }
    Ok(y_obs.y.iter().zip(y_sim.y.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Unnormalised Gaussian log-likelihood `-||y_obs - y_sim||^2 / (2 sigma_e^2)`.
pub fn log_likelihood(y_obs: &MeasurementSeries, y_sim: &MeasurementSeries, cfg: &LikelihoodConfig) -> Result<f64> {
    Ok(-squared_residual(y_obs, y_sim)? / (2.0 * cfg.sigma_e * cfg.sigma_e))
}

/// Bilinear resampling of a field between lattices covering the same unit square.
pub fn resample_field(field: &ExcitabilityField, from: &GridGeometry, to: &GridGeometry) -> Result<ExcitabilityField> {
    if field.len() != from.n_nodes() {
        return Err(Error::dims(from.n_nodes(), field.len()));
    }
    if from.nx == to.nx && from.ny == to.ny {
        return Ok(field.clone());
    }
    let sample = |fx: f64, fy: f64| {
        let x = fx * (from.nx - 1) as f64;
        let y = fy * (from.ny - 1) as f64;
        let x0 = (x.floor() as usize).min(from.nx - 2);
        let y0 = (y.floor() as usize).min(from.ny - 2);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let f = |ix, iy| field.theta[from.index(ix, iy)];
        (1.0 - ty) * ((1.0 - tx) * f(x0, y0) + tx * f(x0 + 1, y0)) + ty * ((1.0 - tx) * f(x0, y0 + 1) + tx * f(x0 + 1, y0 + 1))
    };
    let theta = (0..to.n_nodes())
        .map(|i| {
            let (ix, iy) = to.coords(i);
            sample(ix as f64 / (to.nx - 1) as f64, iy as f64 / (to.ny - 1) as f64)
        })
        .collect();
    Ok(ExcitabilityField { theta })
}

/// Row-per-frame CSV: a `# shape=<rows>x<cols>` line, a header, then data.
pub fn frames_to_csv(frames: &Array2<f64>, column_prefix: &str) -> String {
    let mut out = format!("# shape={}x{}\nframe", frames.nrows(), frames.ncols());
    for j in 0..frames.ncols() {
        out.push_str(&format!(",{column_prefix}{j}"));
    }
    out.push('\n');
    for (k, row) in frames.axis_iter(Axis(0)).enumerate() {
        out.push_str(&k.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`frames_to_csv`].
pub fn frames_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines();
    let shape = lines.next().and_then(|l| l.strip_prefix("# shape=")).ok_or_else(|| Error::Parse("missing shape line".into()))?;
    let (r, c) = shape.split_once('x').ok_or_else(|| Error::Parse("bad shape".into()))?;
    let rows: usize = r.trim().parse().map_err(|_| Error::Parse("bad row count".into()))?;
    let cols: usize = c.trim().parse().map_err(|_| Error::Parse("bad column count".into()))?;
    lines.next();
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines.filter(|l| !l.is_empty()) {
        for tok in line.split(',').skip(1) {
            data.push(tok.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
}

/// CSV with one row per frame and one column per lead.
pub fn measurements_to_csv(y: &MeasurementSeries) -> String {
    frames_to_csv(&y.y.t().to_owned(), "lead_")
}

pub fn measurements_from_csv(text: &str) -> Result<MeasurementSeries> {
    Ok(MeasurementSeries { y: frames_from_csv(text)?.t().to_owned() })
}

/// Column sums of `H`, handy for checking lead sensitivity.
pub fn lead_sensitivity(lead: &LeadField) -> Array1<f64> {
    lead.h.sum_axis(Axis(0))
}
