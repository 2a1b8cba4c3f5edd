use bal_core::experiment::{cmd_evaluate, cmd_run, run_pipeline, ExperimentConfig, Method};
use bal_core::Error;
use std::fs;
use std::path::Path;

fn mtime(p: &Path) -> std::time::SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn completed_stages_are_reused_and_damaged_ones_rebuilt() {
    let cfg = ExperimentConfig::small();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let first = run_pipeline(&cfg, root).unwrap();
    let report = fs::read(root.join("report.json")).unwrap();
    let vae_bin = root.join("vae/vae.bin");
    let samples = root.join("runs/bal-entropy/case_00/samples.csv");
    let (t_vae, original) = (mtime(&vae_bin), fs::read(&samples).unwrap());

    let second = run_pipeline(&cfg, root).unwrap();
    assert_eq!(first, second);
    assert_eq!(mtime(&vae_bin), t_vae, "trained VAE was rewritten");

    fs::write(&samples, b"damaged").unwrap();
    cmd_run(&cfg, root, Method::BalEntropy).unwrap();
    assert_eq!(fs::read(&samples).unwrap(), original);
    assert_eq!(mtime(&vae_bin), t_vae);
    cmd_evaluate(&cfg, root).unwrap();
    assert_eq!(fs::read(root.join("report.json")).unwrap(), report);
}

#[test]
fn stale_upstream_blocks_downstream_stages() {
    let cfg = ExperimentConfig::small();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, dir.path()).unwrap();
    let reseeded = ExperimentConfig { seed: cfg.seed + 1, ..cfg };
    let err = cmd_run(&reseeded, dir.path(), Method::TwoStage).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
}

#[test]
fn report_covers_every_method_and_case() {
    let cfg = ExperimentConfig::small();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&cfg, dir.path()).unwrap();
    for m in Method::ALL {
        let rows: Vec<_> = report.cases.iter().filter(|c| c.method == m).collect();
        assert_eq!(rows.len(), cfg.cases.len(), "{m}");
    }
    assert_eq!(report.comparisons.len(), cfg.cases.len());
    for c in &report.comparisons {
        assert!(c.lognormal_simulations < c.direct_simulations);
        assert!(c.two_stage_simulations.is_some());
        assert!(c.lognormal_kl >= 0.0 && c.ucb_kl >= 0.0);
    }
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
}
