//! `bal`: drive the latent-space active-learning experiment from the shell.
//!
//! Exit codes: 0 success, 1 usage, configuration or IO error, 2 missing
//! prerequisite stage, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use bal_core::experiment::{self, ExperimentConfig, Method};
use bal_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bal", version, about = "Bayesian active learning of latent posteriors for a 2D excitation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults to the selected preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "desk", value_parser = ["desk", "small"])]
    preset: String,
    /// Run directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training fields, the lead field and the test cases.
    Generate(Common),
    /// Train the VAE on the generated training fields.
    TrainVae(Common),
    /// Run one inference method on every case.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Compare every available method against the direct-MCMC reference.
    Evaluate(Common),
    /// generate, train-vae, all methods, evaluate.
    Pipeline(Common),
    /// Print the resolved configuration as JSON.
    Config(Common),
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        let out = self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("bal-run"));
        cfg.output_dir = None;
        cfg.validate()?;
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = c.resolve()?;
            experiment::cmd_generate(&cfg, &out)?;
            println!("data written to {}", out.join("data").display());
        }
        Command::TrainVae(c) => {
            let (cfg, out) = c.resolve()?;
            let m = experiment::cmd_train_vae(&cfg, &out)?;
            println!("vae: {}", m.info);
        }
        Command::Run { common, method } => {
            let (cfg, out) = common.resolve()?;
            for r in experiment::cmd_run(&cfg, &out, method)? {
                println!("{method} case {:02}: {} simulations", r.case, r.simulations);
            }
        }
        Command::Evaluate(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiment::cmd_evaluate(&cfg, &out)?;
            print_summary(&report);
        }
        Command::Pipeline(c) => {
            let (cfg, out) = c.resolve()?;
            let report = experiment::run_pipeline(&cfg, &out)?;
            print_summary(&report);
        }
        Command::Config(c) => {
            let (cfg, _) = c.resolve()?;
            print!("{}", bal_core::io::to_json_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn print_summary(report: &experiment::Report) {
    for a in &report.aggregate {
        let pick = |n: &str| a.metrics.iter().find(|m| m.name == n).map_or(f64::NAN, |m| m.mean);
        println!(
            "{:<13} cases={:<3} sims={:>9.1} KL={:.4} dice={:.3} rmse={:.3}",
            a.method.name(),
            a.cases,
            pick("simulations"),
            pick("kl_from_reference"),
            pick("dice_mean_field"),
            pick("rmse_mean_field")
        );
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
