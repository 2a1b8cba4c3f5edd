//! The on-disk experiment: data generation, VAE training, per-case inference
//! under each method, and evaluation against the reference sampler.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json
//! manifest.json                 every artifact with its SHA-256
//! data/                         training fields, lead field, cases/case_NN/
//! vae/                          checkpoint, loss history, latent scatter
//! runs/pilot/case_NN/           pilot surrogate shared by the MCMC methods
//! runs/<method>/case_NN/        samples.csv, result.json (+ BAL history)
//! report.json, report.csv
//! ```
//!
//! Each directory with outputs carries a `stage.json` fingerprinting its
//! inputs; a stage whose fingerprint matches and whose files hash correctly
//! is not recomputed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acquisition::{AcquisitionKind, MaximizerOptions, SearchBox};
use crate::active_learner::{run_bal, surrogate_pdf_on_grid, BalConfig, BalResult, LogTarget, TargetPosterior};
use crate::data_gen::{self, SectorSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, FieldMetrics, SampleKlOptions, DICE_THRESHOLD};
use crate::forward_model::{
    add_measurement_noise, apply_lead_field, build_lead_field, frames_from_csv, frames_to_csv, measurements_from_csv, measurements_to_csv,
    noise_std_for_snr, resample_field, ApParams, ExcitabilityField, GridGeometry, LeadField, LikelihoodConfig, MeasurementSeries,
    Simulator, StimulusProtocol,
};
use crate::gp::GpPosterior;
use crate::io::{self, StageManifest, StageWriter};
use crate::mcmc::{self, McmcProtocol, ProposalSpec, SampleSet, TuneOptions};
use crate::par::{self, Execution};
use crate::rng::{self, derive_seed};
use crate::vae::{self, TrainConfig, VaeModel};
use crate::LatentCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DirectMcmc,
    TwoStage,
    BalEntropy,
    BalVariance,
    BalUcb,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::DirectMcmc, Method::TwoStage, Method::BalEntropy, Method::BalVariance, Method::BalUcb];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DirectMcmc => "direct-mcmc",
            Method::TwoStage => "two-stage",
            Method::BalEntropy => "bal-entropy",
            Method::BalVariance => "bal-variance",
            Method::BalUcb => "bal-ucb",
        }
    }

    pub fn is_bal(&self) -> bool {
        matches!(self, Method::BalEntropy | Method::BalVariance | Method::BalUcb)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::invalid(format!("unknown method '{s}' (expected one of direct-mcmc, two-stage, bal-entropy, bal-variance, bal-ucb)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub count: usize,
    /// Lesion sizes are drawn from `[min_fraction, max_fraction] · N`.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub validation_fraction: f64,
    /// Lattice the training fields (and so the VAE) live on; defaults to the
    /// case geometry.
    #[serde(default)]
    pub geometry: Option<GridGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    pub hidden: usize,
    pub latent_dim: usize,
    pub train: TrainConfig,
}

/// How the equal-budget UCB run picks its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UcbBudget {
    /// The larger evaluation count of the two log-normal runs on the same
    /// case, with convergence stopping disabled.
    MatchLognormal,
    /// Stop on the KL criterion like the other acquisitions.
    Converge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalSpec {
    pub initial_design_size: usize,
    pub max_iterations: usize,
    pub kl_threshold: f64,
    pub kl_window: usize,
    pub quadrature_grid: usize,
    pub search_half_width: f64,
    pub ucb_kappa: f64,
    pub ucb_budget: UcbBudget,
    pub hyperopt_restarts: usize,
    pub hyperopt_evals: usize,
    pub maximizer: MaximizerOptions,
}

impl Default for BalSpec {
    fn default() -> Self {
        let b = BalConfig::default();
        BalSpec {
            initial_design_size: b.initial_design_size,
            max_iterations: b.max_iterations,
            kl_threshold: b.kl_threshold,
            kl_window: b.kl_window,
            quadrature_grid: b.quadrature_grid,
            search_half_width: b.search_half_width,
            ucb_kappa: AcquisitionKind::DEFAULT_KAPPA,
            ucb_budget: UcbBudget::MatchLognormal,
            hyperopt_restarts: b.hyperopt_restarts,
            hyperopt_evals: b.hyperopt_evals,
            maximizer: b.maximizer,
        }
    }
}

impl BalSpec {
    pub fn config(&self, acquisition: AcquisitionKind, seed: u64) -> BalConfig {
        BalConfig {
            acquisition,
            initial_design_size: self.initial_design_size,
            max_iterations: self.max_iterations,
            kl_threshold: self.kl_threshold,
            kl_window: self.kl_window,
            quadrature_grid: self.quadrature_grid,
            search_half_width: self.search_half_width,
            seed,
            stop_on_convergence: true,
            hyperopt_restarts: self.hyperopt_restarts,
            hyperopt_evals: self.hyperopt_evals,
            maximizer: self.maximizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSpec {
    pub protocol: McmcProtocol,
    pub tune: TuneOptions,
    /// Post-design UCB iterations of the pilot surrogate used for proposal
    /// tuning and as the two-stage screening density.
    pub pilot_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub kl: SampleKlOptions,
    pub dice_threshold: f64,
    /// Probability mass of the reference region used for the acquisition
    /// coverage fraction.
    pub coverage_mass: f64,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec { kl: SampleKlOptions::default(), dice_threshold: DICE_THRESHOLD, coverage_mass: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub geometry: GridGeometry,
    pub ap: ApParams,
    pub n_leads: usize,
    pub snr_db: f64,
    /// Multiplies the SNR-implied noise level to give the likelihood σ_e.
    pub sigma_e_scale: f64,
    pub training: TrainingSpec,
    pub vae: VaeSpec,
    pub bal: BalSpec,
    pub mcmc: McmcSpec,
    pub evaluation: EvaluationSpec,
    pub cases: Vec<SectorSpec>,
    /// Worker threads for case-level parallelism; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn sector(ids: &[usize], severity: f64) -> SectorSpec {
    SectorSpec::new(ids.to_vec(), severity).expect("preset sectors are valid")
}

impl ExperimentConfig {
    /// 24×24 lattice, 12 leads, ten sector cases, full MCMC protocol.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 2024,
            geometry: GridGeometry { nx: 24, ny: 24, h: 1.0 },
            ap: ApParams::default(),
            n_leads: 12,
            snr_db: 20.0,
            sigma_e_scale: 1.0,
            training: TrainingSpec { count: 5000, min_fraction: 0.05, max_fraction: 0.40, validation_fraction: 0.1, geometry: None },
            vae: VaeSpec { hidden: 512, latent_dim: 2, train: TrainConfig::default() },
            bal: BalSpec::default(),
            mcmc: McmcSpec { protocol: McmcProtocol::default(), tune: TuneOptions::default(), pilot_iterations: 20 },
            evaluation: EvaluationSpec::default(),
            cases: vec![
                sector(&[0], 0.50),
                sector(&[1, 2], 0.45),
                sector(&[3], 0.40),
                sector(&[4, 5, 6], 0.50),
                sector(&[7, 0], 0.40),
                sector(&[2], 0.50),
                sector(&[5, 6], 0.45),
                sector(&[1, 2, 3], 0.40),
                sector(&[6], 0.45),
                sector(&[3, 4], 0.50),
            ],
            workers: 0,
            output_dir: None,
        }
    }

    /// A minutes-scale variant for smoke runs and reproducibility checks.
    pub fn small() -> Self {
        let mut c = Self::desk();
        c.geometry = GridGeometry { nx: 12, ny: 12, h: 1.0 };
        c.ap.t_end = 30.0;
        c.n_leads = 6;
        c.training.count = 400;
        c.vae = VaeSpec { hidden: 32, latent_dim: 2, train: TrainConfig { epochs: 15, ..TrainConfig::default() } };
        c.bal.max_iterations = 30;
        c.bal.quadrature_grid = 41;
        c.bal.hyperopt_restarts = 2;
        c.bal.hyperopt_evals = 60;
        c.bal.maximizer = MaximizerOptions { grid_per_axis: 21, n_refine: 2, refine_evals: 40 };
        c.mcmc.protocol.chain_length = 600;
        c.mcmc.tune = TuneOptions { pilot_length: 200, max_pilots: 8, ..TuneOptions::default() };
        c.mcmc.pilot_iterations = 5;
        c.evaluation.kl = SampleKlOptions { quadrature_per_axis: 61, max_eval_points: 400, pad_bandwidths: 4.0 };
        c.cases = vec![sector(&[1, 2], 0.45), sector(&[5], 0.50)];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            other => Err(Error::invalid(format!("unknown preset '{other}' (expected desk or small)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_string(path)?)
    }

    pub fn training_geometry(&self) -> GridGeometry {
        self.training.geometry.unwrap_or(self.geometry)
    }

    /// Geometry the decoder output must be resampled from, if any.
    pub fn decoder_geometry(&self) -> Option<GridGeometry> {
        self.training.geometry.filter(|g| *g != self.geometry)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.ap.validate(&self.geometry)?;
        let tg = self.training_geometry();
        tg.validate()?;
        self.ap.validate(&tg)?;
        if self.n_leads == 0 || !self.snr_db.is_finite() || !(self.sigma_e_scale > 0.0 && self.sigma_e_scale.is_finite()) {
            return Err(Error::invalid("need n_leads >= 1, finite snr_db and a positive sigma_e_scale"));
        }
        let t = &self.training;
        if t.count < 2 || !(0.0 < t.min_fraction && t.min_fraction <= t.max_fraction && t.max_fraction <= 1.0) {
            return Err(Error::invalid("training needs count >= 2 and 0 < min_fraction <= max_fraction <= 1"));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        self.vae.train.validate()?;
        if self.vae.hidden == 0 || self.vae.latent_dim == 0 {
            return Err(Error::invalid("VAE hidden width and latent dimension must be >= 1"));
        }
        AcquisitionKind::Ucb { kappa: self.bal.ucb_kappa }.validate()?;
        self.bal.config(AcquisitionKind::LognormalEntropy, 0).validate()?;
        let p = &self.mcmc.protocol;
        if p.n_chains < 2 || p.chain_length < 100 || p.thin == 0 || !(0.0..1.0).contains(&p.burn_in_fraction) {
            return Err(Error::invalid("MCMC protocol needs >= 2 chains of length >= 100, thin >= 1, burn-in in [0, 1)"));
        }
        if !(0.0 < p.target_acceptance && p.target_acceptance < 1.0) || self.mcmc.tune.pilot_length == 0 {
            return Err(Error::invalid("target acceptance must lie in (0, 1) and pilot chains must be non-empty"));
        }
        if !(0.0 < self.evaluation.coverage_mass && self.evaluation.coverage_mass < 1.0) {
            return Err(Error::invalid("coverage_mass must lie in (0, 1)"));
        }
        if self.cases.is_empty() {
            return Err(Error::invalid("at least one case is required"));
        }
        for c in &self.cases {
            SectorSpec::new(c.sector_ids.clone(), c.severity)?;
        }
        Ok(())
    }

    fn size_range(&self) -> (usize, usize) {
        let n = self.training_geometry().n_nodes() as f64;
        let lo = ((self.training.min_fraction * n).round() as usize).max(1);
        let hi = ((self.training.max_fraction * n).round() as usize).max(lo);
        (lo, hi)
    }
}

fn case_dir(i: usize) -> String {
    format!("case_{i:02}")
}

fn missing(what: impl Into<String>) -> Error {
    Error::MissingPrerequisite(what.into())
}

fn require_stage(root: &Path, dir: &str, fingerprint: &str, hint: &str) -> Result<StageManifest> {
    io::completed_stage(root, dir, fingerprint).ok_or_else(|| missing(format!("{dir} is missing or stale; run `{hint}` first")))
}

fn data_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    io::fingerprint(&json!({
        "stage": "data",
        "seed": cfg.seed,
        "geometry": cfg.geometry,
        "ap": cfg.ap,
        "n_leads": cfg.n_leads,
        "snr_db": cfg.snr_db,
        "training": cfg.training,
        "cases": cfg.cases,
    }))
}

fn vae_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    io::fingerprint(&json!({ "stage": "vae", "data": data_fingerprint(cfg)?, "vae": cfg.vae }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub index: usize,
    pub spec: SectorSpec,
    pub snr_db: f64,
    /// Noise standard deviation implied by the SNR for this case's signal.
    pub noise_std: f64,
    pub sigma_e: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingMeta {
    geometry: GridGeometry,
    count: usize,
    size_range: (usize, usize),
    seed_nodes: Vec<usize>,
    lesion_sizes: Vec<usize>,
    validation_start: usize,
}

/// Writes training fields, the lead field and every case's ground truth and
/// noisy observation under `root/data`.
pub fn cmd_generate(cfg: &ExperimentConfig, root: &Path) -> Result<StageManifest> {
    cfg.validate()?;
    io::write_json(&root.join("config.json"), cfg)?;
    let fp = data_fingerprint(cfg)?;
    if let Some(m) = io::completed_stage(root, "data", &fp) {
        log::info!("data: up to date");
        io::write_run_manifest(root)?;
        return Ok(m);
    }
    log::info!("data: generating {} training fields and {} cases", cfg.training.count, cfg.cases.len());
    let mut w = StageWriter::new(root, "data", "generate", fp);

    let tg = cfg.training_geometry();
    let size_range = cfg.size_range();
    let mut rng = rng::seeded(derive_seed(cfg.seed, "training-set"));
    let examples = data_gen::generate_training_set(&tg, cfg.training.count, size_range, &mut rng)?;
    let fields: Vec<ExcitabilityField> = examples.iter().map(|e| e.field.clone()).collect();
    w.write("training_fields.csv", data_gen::fields_to_csv(&fields).as_bytes())?;
    let validation_start = cfg.training.count - ((cfg.training.count as f64 * cfg.training.validation_fraction).round() as usize);
    w.write_json(
        "training_meta.json",
        &TrainingMeta {
            geometry: tg,
            count: cfg.training.count,
            size_range,
            seed_nodes: examples.iter().map(|e| e.seed_node).collect(),
            lesion_sizes: examples.iter().map(|e| e.lesion_size).collect(),
            validation_start,
        },
    )?;

    let lead = build_lead_field(&cfg.geometry, cfg.n_leads, derive_seed(cfg.seed, "lead-field"))?;
    w.write("lead_field.csv", frames_to_csv(&lead.h, "n").as_bytes())?;

    let sim = Simulator::new(cfg.geometry, cfg.ap)?;
    let stim = StimulusProtocol::centered(&cfg.geometry);
    let cases = par::try_map_range(Execution::default(), cfg.cases.len(), |i| {
        let spec = &cfg.cases[i];
        let truth = data_gen::make_test_field(&cfg.geometry, spec, &mut rng::seeded(derive_seed(cfg.seed, &format!("case-{i}-field"))));
        let clean = apply_lead_field(&lead, &sim.simulate(&truth, &stim)?)?;
        let noise_std = noise_std_for_snr(&clean, cfg.snr_db);
        let observed = add_measurement_noise(&clean, cfg.snr_db, &mut rng::seeded(derive_seed(cfg.seed, &format!("case-{i}-noise"))));
        let info = CaseInfo { index: i, spec: spec.clone(), snr_db: cfg.snr_db, noise_std, sigma_e: noise_std * cfg.sigma_e_scale };
        Ok::<_, Error>((truth, observed, info))
    })?;
    for (i, (truth, observed, info)) in cases.iter().enumerate() {
        let d = Path::new("cases").join(case_dir(i));
        w.write(d.join("truth.csv"), data_gen::fields_to_csv(std::slice::from_ref(truth)).as_bytes())?;
        w.write(d.join("observed.csv"), measurements_to_csv(observed).as_bytes())?;
        w.write_json(d.join("case.json"), info)?;
    }
    let infos: Vec<&CaseInfo> = cases.iter().map(|c| &c.2).collect();
    let m = w.finish(json!({ "training_count": cfg.training.count, "snr_db": cfg.snr_db, "cases": infos }))?;
    io::write_run_manifest(root)?;
    Ok(m)
}

/// Trains the VAE on the generated training split and writes the checkpoint,
/// loss history and latent scatter under `root/vae`.
pub fn cmd_train_vae(cfg: &ExperimentConfig, root: &Path) -> Result<StageManifest> {
    cfg.validate()?;
    require_stage(root, "data", &data_fingerprint(cfg)?, "generate")?;
    let fp = vae_fingerprint(cfg)?;
    if let Some(m) = io::completed_stage(root, "vae", &fp) {
        log::info!("vae: up to date");
        return Ok(m);
    }
    let fields = data_gen::fields_from_csv(&io::read_string(&root.join("data/training_fields.csv"))?)?;
    let meta: TrainingMeta = io::read_json(&root.join("data/training_meta.json"))?;
    let (train, valid) = fields.split_at(meta.validation_start);
    log::info!("vae: training on {} fields ({} held out)", train.len(), valid.len());
    let mut train_cfg = cfg.vae.train;
    train_cfg.seed = derive_seed(cfg.seed, "vae");
    let trained = vae::train_vae(train, cfg.vae.hidden, cfg.vae.latent_dim, &train_cfg)?;

    let mut w = StageWriter::new(root, "vae", "train-vae", fp);
    vae::save_checkpoint(&trained.model, Some(&train_cfg), &w.dir(), "vae")?;
    w.adopt("vae.json")?;
    w.adopt("vae.bin")?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in trained.loss_history.iter().enumerate() {
        loss.push_str(&format!("{e},{l}\n"));
    }
    w.write("loss_history.csv", loss.as_bytes())?;

    let codes = trained.model.encode_means(&fields)?;
    let sectors = data_gen::sector_of_nodes(&meta.geometry);
    let mut scatter = String::from("index,split,");
    scatter.push_str(&(0..cfg.vae.latent_dim).map(|k| format!("z{k}")).collect::<Vec<_>>().join(","));
    scatter.push_str(",lesion_size,sector\n");
    for (i, row) in codes.rows().into_iter().enumerate() {
        let split = if i < meta.validation_start { "train" } else { "validation" };
        let z: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        scatter.push_str(&format!("{i},{split},{},{},{}\n", z.join(","), meta.lesion_sizes[i], sectors[meta.seed_nodes[i]]));
    }
    w.write("latent_scatter.csv", scatter.as_bytes())?;

    let train_rmse = vae::reconstruction_rmse(&trained.model, train)?;
    let valid_rmse = if valid.is_empty() { None } else { Some(vae::reconstruction_rmse(&trained.model, valid)?) };
    let m = w.finish(json!({
        "initial_loss": trained.loss_history.first(),
        "final_loss": trained.loss_history.last(),
        "train_rmse": train_rmse,
        "validation_rmse": valid_rmse,
    }))?;
    io::write_run_manifest(root)?;
    Ok(m)
}

/// Everything a per-case run needs, loaded from disk.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub vae: VaeModel,
    pub simulator: Simulator,
    pub lead: LeadField,
    pub cases: Vec<CaseData>,
    vae_fp: String,
}

pub struct CaseData {
    pub info: CaseInfo,
    pub truth: ExcitabilityField,
    pub observed: MeasurementSeries,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        require_stage(root, "data", &data_fingerprint(cfg)?, "generate")?;
        let vae_fp = vae_fingerprint(cfg)?;
        require_stage(root, "vae", &vae_fp, "train-vae")?;
        let (vae, _) = vae::load_checkpoint(&root.join("vae"), "vae")?;
        let lead = LeadField::new(frames_from_csv(&io::read_string(&root.join("data/lead_field.csv"))?)?)?;
        let cases = (0..cfg.cases.len())
            .map(|i| {
                let d = root.join("data/cases").join(case_dir(i));
                let truth = data_gen::fields_from_csv(&io::read_string(&d.join("truth.csv"))?)?
                    .pop()
                    .ok_or_else(|| Error::Parse("empty truth file".into()))?;
                Ok(CaseData {
                    info: io::read_json(&d.join("case.json"))?,
                    truth,
                    observed: measurements_from_csv(&io::read_string(&d.join("observed.csv"))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Workspace {
            cfg: cfg.clone(),
            root: root.to_path_buf(),
            vae,
            simulator: Simulator::new(cfg.geometry, cfg.ap)?,
            lead,
            cases,
            vae_fp,
        })
    }

    pub fn target(&self, case: usize) -> Result<TargetPosterior<'_>> {
        let c = &self.cases[case];
        Ok(TargetPosterior::new(
            &self.vae,
            &self.simulator,
            self.cfg.decoder_geometry(),
            StimulusProtocol::centered(&self.cfg.geometry),
            &self.lead,
            &c.observed,
            LikelihoodConfig::new(c.info.sigma_e)?,
        ))
    }

    fn search_box(&self) -> Result<SearchBox> {
        SearchBox::symmetric(self.cfg.vae.latent_dim, self.cfg.bal.search_half_width)
    }

    /// Decoded field on the case geometry.
    pub fn field_on_case_geometry(&self, theta: Vec<f64>) -> Result<ExcitabilityField> {
        let f = ExcitabilityField { theta };
        match self.cfg.decoder_geometry() {
            Some(from) => resample_field(&f, &from, &self.cfg.geometry),
            None => Ok(f),
        }
    }

    fn method_fingerprint(&self, method: &str, case: usize, extra: serde_json::Value) -> Result<String> {
        io::fingerprint(&json!({
            "stage": method,
            "case": case,
            "vae": self.vae_fp,
            "sigma_e": self.cases[case].info.sigma_e,
            "bal": self.cfg.bal,
            "mcmc": self.cfg.mcmc,
            "seed": self.cfg.seed,
            "extra": extra,
        }))
    }
}

/// `log π̃(z)`: the GP mean inside the search box, continued outside by the
/// prior's tail so the surrogate stays positive and integrable everywhere.
pub fn surrogate_log_density(gp: &GpPosterior, bounds: &SearchBox, z: &[f64]) -> f64 {
    let zc = bounds.clamp(z);
    let outside: f64 = z.iter().map(|v| v * v).sum::<f64>() - zc.iter().map(|v| v * v).sum::<f64>();
    gp.mean(&zc) - 0.5 * outside
}

/// The `k` training inputs with the largest targets, best first.
fn top_training_points(bal: &BalResult, k: usize) -> Vec<LatentCode> {
    let mut idx: Vec<usize> = (0..bal.training.len()).collect();
    idx.sort_by(|&a, &b| bal.training.targets[b].total_cmp(&bal.training.targets[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| bal.training.inputs[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotResult {
    pub bal: BalResult,
    pub proposal_scale: f64,
    pub pilot_acceptance: f64,
    pub tuning_pilots: usize,
    pub inits: Vec<LatentCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub case: usize,
    /// Forward simulations spent, including any pilot surrogate.
    pub simulations: usize,
    pub proposal_scale: f64,
    pub acceptance_rates: Vec<f64>,
    pub gelman_rubin: Vec<f64>,
    pub geweke: Vec<Vec<f64>>,
    pub bal_iterations: Option<usize>,
    pub bal_converged: Option<bool>,
    pub bal_evaluations: Option<usize>,
    /// Post-design acquisition points (BAL methods).
    pub acquisitions: Vec<LatentCode>,
}

fn pilot_dir(case: usize) -> String {
    format!("runs/pilot/{}", case_dir(case))
}

fn method_dir(method: Method, case: usize) -> String {
    format!("runs/{}/{}", method.name(), case_dir(case))
}

fn load_or_run_pilot(ws: &Workspace, case: usize) -> Result<PilotResult> {
    let dir = pilot_dir(case);
    let fp = ws.method_fingerprint("pilot", case, json!(null))?;
    if io::completed_stage(&ws.root, &dir, &fp).is_some() {
        return io::read_json(&ws.root.join(&dir).join("pilot.json"));
    }
    log::info!("case {case}: pilot surrogate");
    let target = ws.target(case)?;
    let mut bal_cfg =
        ws.cfg.bal.config(AcquisitionKind::Ucb { kappa: ws.cfg.bal.ucb_kappa }, derive_seed(ws.cfg.seed, &format!("case-{case}-pilot")));
    bal_cfg.max_iterations = ws.cfg.mcmc.pilot_iterations;
    bal_cfg.stop_on_convergence = false;
    let bal = run_bal(&target, &bal_cfg, ws.cfg.vae.latent_dim)?;
    let gp = bal.posterior()?;
    let bounds = ws.search_box()?;
    let inits = top_training_points(&bal, ws.cfg.mcmc.protocol.n_chains);
    let tuned = mcmc::tune_proposal(
        &|z: &[f64]| Ok(surrogate_log_density(&gp, &bounds, z)),
        &inits[0],
        ws.cfg.mcmc.protocol.target_acceptance,
        &ws.cfg.mcmc.tune,
        &mut rng::seeded(derive_seed(ws.cfg.seed, &format!("case-{case}-pilot-tune"))),
    )?;
    let pilot = PilotResult {
        bal,
        proposal_scale: tuned.proposal.scale(),
        pilot_acceptance: tuned.pilot_acceptance,
        tuning_pilots: tuned.pilots,
        inits,
    };
    let mut w = StageWriter::new(&ws.root, &dir, "pilot", fp);
    w.write_json("pilot.json", &pilot)?;
    w.finish(json!({ "evaluations": pilot.bal.n_evaluations, "proposal_scale": pilot.proposal_scale }))?;
    Ok(pilot)
}

fn record_from_samples(method: Method, case: usize, set: &SampleSet, simulations: usize, scale: f64) -> RunRecord {
    let diag = set.diagnostics.clone();
    RunRecord {
        method,
        case,
        simulations,
        proposal_scale: scale,
        acceptance_rates: set.acceptance_rates.clone(),
        gelman_rubin: diag.as_ref().map(|d| d.gelman_rubin.clone()).unwrap_or_default(),
        geweke: diag.map(|d| d.geweke).unwrap_or_default(),
        bal_iterations: None,
        bal_converged: None,
        bal_evaluations: None,
        acquisitions: Vec::new(),
    }
}

fn write_run(ws: &Workspace, dir: &str, fp: String, record: &RunRecord, set: &SampleSet, bal: Option<&BalResult>) -> Result<()> {
    let mut w = StageWriter::new(&ws.root, dir, record.method.name(), fp);
    w.write("samples.csv", set.to_csv().as_bytes())?;
    w.write_json("result.json", record)?;
    w.write_json(
        "sampling.json",
        &json!({ "chain_seeds": set.chain_seeds, "acceptance_rates": set.acceptance_rates, "diagnostics": set.diagnostics }),
    )?;
    if let Some(b) = bal {
        w.write_json("bal.json", b)?;
        let bounds = ws.search_box()?;
        let pdf = surrogate_pdf_on_grid(&b.posterior()?, &bounds, ws.cfg.bal.quadrature_grid)?;
        w.write("surrogate_pdf.csv", pdf.to_csv().as_bytes())?;
    }
    w.finish(json!({ "simulations": record.simulations }))?;
    Ok(())
}

/// Samples `exp(surrogate)` with the reference protocol.
fn sample_surrogate(ws: &Workspace, case: usize, label: &str, bal: &BalResult) -> Result<(SampleSet, f64)> {
    let gp = bal.posterior()?;
    let bounds = ws.search_box()?;
    let logpdf = |z: &[f64]| Ok(surrogate_log_density(&gp, &bounds, z));
    let inits = top_training_points(bal, ws.cfg.mcmc.protocol.n_chains);
    let tuned = mcmc::tune_proposal(
        &logpdf,
        &inits[0],
        ws.cfg.mcmc.protocol.target_acceptance,
        &ws.cfg.mcmc.tune,
        &mut rng::seeded(derive_seed(ws.cfg.seed, &format!("case-{case}-{label}-tune"))),
    )?;
    let set = mcmc::run_reference_mcmc(
        &logpdf,
        &tuned.proposal,
        &inits,
        &ws.cfg.mcmc.protocol,
        derive_seed(ws.cfg.seed, &format!("case-{case}-{label}-mcmc")),
    )?;
    Ok((set, tuned.proposal.scale()))
}

fn bal_seed(ws: &Workspace, case: usize) -> u64 {
    // Shared by all acquisitions so their initial designs coincide.
    derive_seed(ws.cfg.seed, &format!("case-{case}-bal"))
}

fn load_record(ws: &Workspace, method: Method, case: usize) -> Result<Option<RunRecord>> {
    let dir = method_dir(method, case);
    let m: StageManifest = match io::read_json(&ws.root.join(&dir).join(io::STAGE_FILE)) {
        Ok(m) => m,
        Err(_) => return Ok(None),
    };
    if !m.verify(&ws.root) {
        return Ok(None);
    }
    io::read_json(&ws.root.join(&dir).join("result.json")).map(Some)
}

fn run_case(ws: &Workspace, method: Method, case: usize) -> Result<RunRecord> {
    let dir = method_dir(method, case);
    let extra = match method {
        Method::BalUcb if ws.cfg.bal.ucb_budget == UcbBudget::MatchLognormal => {
            let budget = ucb_budget(ws, case)?;
            json!({ "budget": budget })
        }
        _ => json!(null),
    };
    let fp = ws.method_fingerprint(method.name(), case, extra)?;
    if io::completed_stage(&ws.root, &dir, &fp).is_some() {
        log::info!("{method} case {case}: up to date");
        return io::read_json(&ws.root.join(&dir).join("result.json"));
    }
    log::info!("{method} case {case}: running");
    let protocol = &ws.cfg.mcmc.protocol;
    let mcmc_seed = derive_seed(ws.cfg.seed, &format!("case-{case}-{}-mcmc", method.name()));
    let (record, set, bal) = match method {
        Method::DirectMcmc | Method::TwoStage => {
            let pilot = load_or_run_pilot(ws, case)?;
            let target = ws.target(case)?;
            let exact = |z: &[f64]| target.log_density(z);
            let prop = ProposalSpec::isotropic(ws.cfg.vae.latent_dim, pilot.proposal_scale)?;
            let set = if method == Method::DirectMcmc {
                mcmc::run_reference_mcmc(&exact, &prop, &pilot.inits, protocol, mcmc_seed)?
            } else {
                let gp = pilot.bal.posterior()?;
                let bounds = ws.search_box()?;
                let surrogate = |z: &[f64]| Ok(surrogate_log_density(&gp, &bounds, z));
                mcmc::run_two_stage_mcmc(&exact, &surrogate, &prop, &pilot.inits, protocol, mcmc_seed)?
            };
            let sims = pilot.bal.n_evaluations + target.eval_count();
            (record_from_samples(method, case, &set, sims, pilot.proposal_scale), set, None)
        }
        Method::BalEntropy | Method::BalVariance | Method::BalUcb => {
            let target = ws.target(case)?;
            let kind = match method {
                Method::BalEntropy => AcquisitionKind::LognormalEntropy,
                Method::BalVariance => AcquisitionKind::LognormalVariance,
                _ => AcquisitionKind::Ucb { kappa: ws.cfg.bal.ucb_kappa },
            };
            let mut bal_cfg = ws.cfg.bal.config(kind, bal_seed(ws, case));
            if method == Method::BalUcb && ws.cfg.bal.ucb_budget == UcbBudget::MatchLognormal {
                bal_cfg.max_iterations = ucb_budget(ws, case)?.saturating_sub(bal_cfg.initial_design_size);
                bal_cfg.stop_on_convergence = false;
            }
            let bal = run_bal(&target, &bal_cfg, ws.cfg.vae.latent_dim)?;
            let (set, scale) = sample_surrogate(ws, case, method.name(), &bal)?;
            let mut record = record_from_samples(method, case, &set, target.eval_count(), scale);
            record.bal_iterations = Some(bal.history.len());
            record.bal_converged = Some(bal.converged);
            record.bal_evaluations = Some(bal.n_evaluations);
            record.acquisitions = bal.history.iter().map(|h| h.z.clone()).collect();
            (record, set, Some(bal))
        }
    };
    write_run(ws, &dir, fp, &record, &set, bal.as_ref())?;
    Ok(record)
}

fn ucb_budget(ws: &Workspace, case: usize) -> Result<usize> {
    let mut budget = 0;
    for m in [Method::BalEntropy, Method::BalVariance] {
        let r = load_record(ws, m, case)?
            .ok_or_else(|| missing(format!("{} for case {case} (bal-ucb matches the log-normal budget); run it first", m.name())))?;
        budget = budget.max(r.simulations);
    }
    Ok(budget)
}

/// Runs one method on every case (concurrently across cases).
pub fn cmd_run(cfg: &ExperimentConfig, root: &Path, method: Method) -> Result<Vec<RunRecord>> {
    let ws = Workspace::open(cfg, root)?;
    let n = ws.cases.len();
    let records = par::with_workers(cfg.workers, || par::try_map_range(Execution::default(), n, |i| run_case(&ws, method, i)))?;
    io::write_run_manifest(root)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCaseReport {
    pub method: Method,
    pub case: usize,
    pub simulations: usize,
    /// `simulations / direct-mcmc simulations` on the same case.
    pub simulation_ratio: f64,
    /// `KL(reference ‖ method)` between KDEs of the two sample sets.
    pub kl_from_reference: f64,
    pub mean_error: f64,
    pub mode_error: f64,
    pub std_error: f64,
    pub z_mean: Vec<f64>,
    pub z_mode: Vec<f64>,
    pub z_std: Vec<f64>,
    pub mean_field: FieldMetrics,
    pub mode_field: FieldMetrics,
    pub mean_field_std: f64,
    pub acceptance_rates: Vec<f64>,
    pub gelman_rubin: Vec<f64>,
    pub bal_iterations: Option<usize>,
    pub bal_converged: Option<bool>,
    /// Fraction of post-design acquisitions inside the reference
    /// high-probability region.
    pub acquisition_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub cases: usize,
    pub metrics: Vec<AggregateMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseComparison {
    pub case: usize,
    /// Median over the entropy and variance runs.
    pub lognormal_kl: f64,
    pub ucb_kl: f64,
    pub lognormal_better: bool,
    pub lognormal_simulations: usize,
    pub ucb_simulations: usize,
    pub direct_simulations: usize,
    pub two_stage_simulations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cases: Vec<MethodCaseReport>,
    pub aggregate: Vec<Aggregate>,
    pub comparisons: Vec<CaseComparison>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn read_samples(ws: &Workspace, method: Method, case: usize) -> Result<Vec<LatentCode>> {
    SampleSet::samples_from_csv(&io::read_string(&ws.root.join(method_dir(method, case)).join("samples.csv"))?)
}

struct Reference {
    samples: Vec<LatentCode>,
    stats: evaluation::ZStats,
    kde: evaluation::KdeModel,
    coverage_threshold: f64,
    simulations: usize,
}

fn evaluate_case(ws: &Workspace, case: usize, methods: &[Method]) -> Result<Vec<MethodCaseReport>> {
    let reference_record = load_record(ws, Method::DirectMcmc, case)?
        .ok_or_else(|| missing(format!("direct-mcmc reference for case {case}; run `run --method direct-mcmc` first")))?;
    let samples = read_samples(ws, Method::DirectMcmc, case)?;
    let kde = evaluation::kde_fit(&samples, &evaluation::BandwidthRule::Silverman)?;
    let stride = samples.len().div_ceil(ws.cfg.evaluation.kl.max_eval_points.max(100));
    let mut dens: Vec<f64> = samples.iter().step_by(stride).map(|z| kde.log_density(z)).collect();
    dens.sort_by(f64::total_cmp);
    let q = ((1.0 - ws.cfg.evaluation.coverage_mass) * dens.len() as f64).floor() as usize;
    let reference = Reference {
        stats: evaluation::z_stats(&samples)?,
        coverage_threshold: dens[q.min(dens.len() - 1)],
        samples,
        kde,
        simulations: reference_record.simulations,
    };
    let truth = &ws.cases[case].truth;
    let mut out = Vec::new();
    for &method in methods {
        let Some(record) = load_record(ws, method, case)? else { continue };
        let samples = if method == Method::DirectMcmc { reference.samples.clone() } else { read_samples(ws, method, case)? };
        let stats = if method == Method::DirectMcmc { reference.stats.clone() } else { evaluation::z_stats(&samples)? };
        let kl = if method == Method::DirectMcmc {
            0.0
        } else {
            evaluation::kl_between_samples(&reference.samples, &samples, &ws.cfg.evaluation.kl)?.value
        };
        let fields = evaluation::decode_field_stats_with_mode(&ws.vae, &samples, &stats.mode)?;
        let mean_field = ws.field_on_case_geometry(fields.mean_field)?;
        let mode_field = ws.field_on_case_geometry(fields.mode_field)?;
        let coverage = if method.is_bal() && !record.acquisitions.is_empty() {
            let inside = record.acquisitions.iter().filter(|z| reference.kde.log_density(z) >= reference.coverage_threshold).count();
            Some(inside as f64 / record.acquisitions.len() as f64)
        } else {
            None
        };
        let threshold = ws.cfg.evaluation.dice_threshold;
        let metrics = |f: &ExcitabilityField| -> Result<FieldMetrics> {
            let c = evaluation::cc(&f.theta, &truth.theta).ok();
            Ok(FieldMetrics {
                dice: evaluation::dice(&f.theta, &truth.theta, threshold)?,
                rmse: evaluation::rmse(&f.theta, &truth.theta)?,
                cc: c,
            })
        };
        out.push(MethodCaseReport {
            method,
            case,
            simulations: record.simulations,
            simulation_ratio: record.simulations as f64 / reference.simulations as f64,
            kl_from_reference: kl,
            mean_error: evaluation::stat_error(&stats.mean, &reference.stats.mean),
            mode_error: evaluation::stat_error(&stats.mode, &reference.stats.mode),
            std_error: evaluation::stat_error(&stats.std, &reference.stats.std),
            z_mean: stats.mean,
            z_mode: stats.mode,
            z_std: stats.std,
            mean_field: metrics(&mean_field)?,
            mode_field: metrics(&mode_field)?,
            mean_field_std: fields.std_field.iter().sum::<f64>() / fields.std_field.len() as f64,
            acceptance_rates: record.acceptance_rates.clone(),
            gelman_rubin: record.gelman_rubin.clone(),
            bal_iterations: record.bal_iterations,
            bal_converged: record.bal_converged,
            acquisition_coverage: coverage,
        });
    }
    Ok(out)
}

const AGGREGATE_FIELDS: [&str; 11] = [
    "simulations",
    "simulation_ratio",
    "kl_from_reference",
    "mean_error",
    "mode_error",
    "std_error",
    "dice_mean_field",
    "rmse_mean_field",
    "cc_mean_field",
    "dice_mode_field",
    "rmse_mode_field",
];

fn metric_values(r: &MethodCaseReport) -> [Option<f64>; 11] {
    [
        Some(r.simulations as f64),
        Some(r.simulation_ratio),
        Some(r.kl_from_reference),
        Some(r.mean_error),
        Some(r.mode_error),
        Some(r.std_error),
        Some(r.mean_field.dice),
        Some(r.mean_field.rmse),
        r.mean_field.cc,
        Some(r.mode_field.dice),
        Some(r.mode_field.rmse),
    ]
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn report_csv(report: &Report) -> String {
    let mut out = format!("method,case,{},converged,iterations,acquisition_coverage\n", AGGREGATE_FIELDS.join(","));
    for r in &report.cases {
        let vals: Vec<String> = metric_values(r).iter().map(|v| fmt_opt(*v)).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.case,
            vals.join(","),
            r.bal_converged.map_or_else(String::new, |b| b.to_string()),
            r.bal_iterations.map_or_else(String::new, |n| n.to_string()),
            fmt_opt(r.acquisition_coverage)
        ));
    }
    for a in &report.aggregate {
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let vals: Vec<String> = a.metrics.iter().map(|m| (if pick == 0 { m.mean } else { m.std }).to_string()).collect();
            out.push_str(&format!("{},{label},{},,,\n", a.method, vals.join(",")));
        }
    }
    out
}

/// Builds `report.json` and `report.csv` from whatever method results exist.
/// The direct-MCMC reference is required.
pub fn cmd_evaluate(cfg: &ExperimentConfig, root: &Path) -> Result<Report> {
    let ws = Workspace::open(cfg, root)?;
    let methods: Vec<Method> = Method::ALL.to_vec();
    let n = ws.cases.len();
    let per_case = par::with_workers(cfg.workers, || par::try_map_range(Execution::default(), n, |i| evaluate_case(&ws, i, &methods)))?;
    let cases: Vec<MethodCaseReport> = per_case.iter().flatten().cloned().collect();

    let aggregate = methods
        .iter()
        .filter_map(|&m| {
            let rows: Vec<&MethodCaseReport> = cases.iter().filter(|r| r.method == m).collect();
            if rows.is_empty() {
                return None;
            }
            let metrics = AGGREGATE_FIELDS
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let vals: Vec<f64> = rows.iter().filter_map(|r| metric_values(r)[k]).collect();
                    let (mean, std) = evaluation::aggregate(&vals);
                    AggregateMetric { name: name.to_string(), mean, std }
                })
                .collect();
            Some(Aggregate { method: m, cases: rows.len(), metrics })
        })
        .collect();

    let find = |m: Method, c: usize| cases.iter().find(|r| r.method == m && r.case == c);
    let comparisons = (0..n)
        .filter_map(|c| {
            let (e, v, u, d) =
                (find(Method::BalEntropy, c)?, find(Method::BalVariance, c)?, find(Method::BalUcb, c)?, find(Method::DirectMcmc, c)?);
            let lognormal_kl = median(vec![e.kl_from_reference, v.kl_from_reference]);
            Some(CaseComparison {
                case: c,
                lognormal_kl,
                ucb_kl: u.kl_from_reference,
                lognormal_better: lognormal_kl < u.kl_from_reference,
                lognormal_simulations: e.simulations.max(v.simulations),
                ucb_simulations: u.simulations,
                direct_simulations: d.simulations,
                two_stage_simulations: find(Method::TwoStage, c).map(|t| t.simulations),
            })
        })
        .collect();

    let report = Report { cases, aggregate, comparisons };
    let mut w =
        StageWriter::new(root, "evaluation", "evaluate", io::fingerprint(&json!({ "vae": ws.vae_fp, "evaluation": cfg.evaluation }))?);
    w.write_json("report.json", &report)?;
    w.write("report.csv", report_csv(&report).as_bytes())?;
    w.finish(json!({ "rows": report.cases.len() }))?;
    io::write_file(&root.join("report.json"), io::to_json_pretty(&report)?.as_bytes())?;
    io::write_file(&root.join("report.csv"), report_csv(&report).as_bytes())?;
    io::write_run_manifest(root)?;
    Ok(report)
}

/// `generate`, `train-vae`, every method, then `evaluate`.
pub fn run_pipeline(cfg: &ExperimentConfig, root: &Path) -> Result<Report> {
    cmd_generate(cfg, root)?;
    cmd_train_vae(cfg, root)?;
    for m in Method::ALL {
        cmd_run(cfg, root, m)?;
    }
    cmd_evaluate(cfg, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::small()] {
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        }
        let desk = ExperimentConfig::desk();
        assert_eq!((desk.geometry.nx, desk.geometry.ny, desk.n_leads, desk.cases.len()), (24, 24, 12, 10));
        assert_eq!(desk.snr_db, 20.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ExperimentConfig::small();
        c.cases.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::small();
        c.mcmc.protocol.n_chains = 1;
        assert!(c.validate().is_err());
        let text = serde_json::to_string(&ExperimentConfig::small()).unwrap().replacen("\"seed\"", "\"sed\"", 1);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("bal".parse::<Method>().is_err());
    }

    #[test]
    fn median_of_pairs_and_odd_counts() {
        assert_eq!(median(vec![3.0, 1.0]), 2.0);
        assert_eq!(median(vec![5.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn missing_prerequisites_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::small();
        assert!(matches!(cmd_train_vae(&cfg, dir.path()), Err(Error::MissingPrerequisite(_))));
        assert!(matches!(cmd_run(&cfg, dir.path(), Method::BalEntropy), Err(Error::MissingPrerequisite(_))));
        assert!(matches!(cmd_evaluate(&cfg, dir.path()), Err(Error::MissingPrerequisite(_))));
    }
}
