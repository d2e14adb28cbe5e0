use std::path::Path;
use std::process::Command;

use fbf_cli::commands::*;
use fbf_cli::formats::{load_checkpoint, load_dataset, SampleReader};
use fbf_cli::ExperimentConfig;
use fbf_core::filtering::fbf_filter;

fn config(dir: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 11
[system]
id = "sinusoidal"
q2 = 0.1
r2 = 0.05
[data]
trajectories = 12
steps = 6
[model.state_flow]
blocks = 2
layers = 2
units = 8
[model.meas_flow]
blocks = 2
layers = 2
units = 8
[model.conditioner]
layers = 2
units = 8
[training]
epochs = 10
batch_size = 16
[evaluation]
test_trajectories = 3
samples = 50
particles = 200
[paths]
dir = "{}"
{extra}"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let ov = Overrides::default();
    let s = cmd_generate(&cfg, &ov).unwrap();
    assert_eq!(s.trajectories, 12);
    cmd_train(&cfg, &ov).unwrap();
    assert!(dir.path().join("model.loss.csv").is_file());
    let samples = cmd_filter(&cfg, &ov).unwrap();
    assert!(dir.path().join("fbf_samples.beliefs.csv").is_file());
    let report = cmd_evaluate(&cfg, &ov).unwrap();
    assert_eq!(report.trajectories, 3);
    assert!(report.metrics.iter().all(|c| c.mean.is_finite()));

    // recomputation from the persisted file agrees with the in-memory path
    let filter = load_checkpoint(&cfg.paths.checkpoint()).unwrap();
    let data = load_dataset(&cfg.paths.dataset()).unwrap();
    let mut reader = SampleReader::open(&samples).unwrap();
    for i in 9..12 {
        let t = &data.trajectories[i];
        let seed = fbf_core::rng::derive_seed(fbf_core::rng::derive_seed(cfg.seed, "filter", 0), "trajectory", i as u64);
        let (_, mem) = fbf_trajectory(&filter, t, 50, seed, cfg.filter).unwrap();
        let disk = reader.next_trajectory().unwrap().unwrap();
        assert_eq!(mem, disk);
        let a = trajectory_metrics(t, mem, 50, &cfg.evaluation.metrics, 2.0).unwrap();
        for (c, v) in report.metrics.iter().zip(a) {
            assert!((c.per_trajectory[i - 9] - v).abs() < 1e-12);
        }
    }

    cmd_pf(&cfg, &ov).unwrap();
    let pf = cmd_evaluate(
        &cfg,
        &Overrides {
            input: Some(cfg.paths.samples("pf")),
            ..Overrides::default()
        },
    )
    .unwrap();
    assert_eq!(pf.method, "pf");
}

#[test]
fn zero_epochs_and_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.training.epochs = 0;
    cfg.data.steps = 1;
    let data = generate_dataset(&cfg).unwrap();
    let f = train_filter(&cfg, &data, None).unwrap();
    assert!(f.history.is_empty());
    assert!(f.sigma0.iter().all(|v| v.is_finite()));
    let run = fbf_filter(&f, &data.trajectories[10].measurements, cfg.filter).unwrap();
    assert_eq!(run.beliefs.len(), 2);
}

#[test]
fn perfect_samples_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let data = generate_dataset(&cfg).unwrap();
    let t = &data.trajectories[0];
    let mut block = Vec::new();
    for k in 1..=t.k() {
        for _ in 0..4 {
            block.extend_from_slice(t.state(k));
        }
    }
    let v = trajectory_metrics(t, block, 4, &cfg.evaluation.metrics, 2.0).unwrap();
    assert!(v.iter().all(|x| x.abs() < 1e-15), "{v:?}");
}

#[test]
fn compare_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[compare]\nmethods = [\"pf\"]\nnoise_levels = [0.05, 0.1, 0.2]\n");
    let rows = run_compare(&cfg).unwrap();
    assert_eq!(rows.len(), 3);
    let csv = compare_csv(&cfg, &rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.contains(",n/a,")));

    let both = config(dir.path(), "[compare]\nmethods = [\"fbf\", \"fbf_prime\"]\nnoise_levels = [0.05, 0.1]\n");
    let rows = run_compare(&both).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.offline_seconds.is_some()));
}

#[test]
fn filter_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let ov = Overrides::default();
    cmd_generate(&cfg, &ov).unwrap();
    cmd_train(&cfg, &ov).unwrap();
    let other_dir = dir.path().join("l96");
    let mut l96 = config(&other_dir, "");
    l96.system = fbf_core::SystemConfig::Lorenz96 {
        dim: 4,
        forcing: 8.0,
        dt: 0.01,
        obs_var: 1.0,
    };
    cmd_generate(&l96, &ov).unwrap();
    let err = cmd_filter(
        &l96,
        &Overrides {
            checkpoint: Some(cfg.paths.checkpoint()),
            ..Overrides::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn fbf(args: &[&str], cwd: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_fbf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = "[system]\nid = \"sinusoidal\"\nr2 = 0.05\n[data]\ntrajectories = 4\nsteps = 2\n[evaluation]\ntest_trajectories = 1\n";
    std::fs::write(dir.path().join("good.toml"), good).unwrap();
    std::fs::write(dir.path().join("typo.toml"), format!("{good}[training]\nepoch = 3\n")).unwrap();
    std::fs::write(dir.path().join("empty.toml"), good.replace("trajectories = 4", "trajectories = 0")).unwrap();
    assert_eq!(fbf(&["generate", "--config", "good.toml"], dir.path()), 0);
    assert_eq!(fbf(&["generate", "--config", "typo.toml"], dir.path()), 2);
    assert_eq!(fbf(&["generate", "--config", "empty.toml"], dir.path()), 2);
    assert_eq!(fbf(&["generate", "--config", "missing.toml"], dir.path()), 4);
    assert_eq!(fbf(&["filter", "--config", "good.toml", "--checkpoint", "nope.fbfc"], dir.path()), 4);
    std::fs::write(dir.path().join("bad.fbfc"), b"FBFCKPT\0garbage").unwrap();
    assert_eq!(fbf(&["filter", "--config", "good.toml", "--checkpoint", "bad.fbfc"], dir.path()), 4);
    assert_eq!(fbf(&["frobnicate"], dir.path()), 2);
}

#[test]
fn divergence_keeps_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let ov = Overrides::default();
    cmd_generate(&cfg, &ov).unwrap();
    let mut hot = cfg.clone();
    // weights this large overflow the objective on the first batch
    hot.training.alpha = 1e308;
    hot.training.beta = 1e308;
    match cmd_train(&hot, &ov) {
        Err(e) => {
            assert_eq!(e.exit_code(), 3, "{e}");
            let csv = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
            assert!(csv.starts_with("iteration,objective,lr"));
        }
        Ok(_) => panic!("expected divergence"),
    }
}
