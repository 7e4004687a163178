use std::path::Path;
use std::process::{Command, Output};

use layerprune_core::checkpoint::load;
use layerprune_core::model::Model;

const SMALL: [&str; 13] = [
    "corpus=synthetic:200000",
    "hidden=16",
    "heads=2",
    "layers=3",
    "mlp_channels=16",
    "max_seq_len=32",
    "seq_len=32",
    "batch_size=4",
    "calibration_sequences=8",
    "calibration_max_len=32",
    "eval_max_len=32",
    "eval_tokens=2048",
    "train_steps=10",
];

fn layerprune(cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_layerprune"));
    c.arg(cmd).arg("--run-dir").arg(dir).env_remove("LAYERPRUNE_RUN_ROOT");
    for s in SMALL {
        c.args(["--set", s]);
    }
    c.args(extra).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn init_train_prune_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&layerprune("init", dir, &["--seed", "3"]));
    ok(&layerprune("train", dir, &[]));
    ok(&layerprune("prune", dir, &["--sparsity", "0.4", "--iterations", "3", "--amplitude", "0.05"]));
    ok(&layerprune("eval", dir, &[]));
    ok(&layerprune("report", dir, &[]));

    let (m0, h0) = load::<f32>(&dir.join("checkpoints/step_0.apck")).unwrap();
    let (m2, h2) = load::<f32>(&dir.join("checkpoints/step_2.apck")).unwrap();
    assert!(m2.param_count().total < m0.param_count().total);
    assert_eq!(h0.seed, 3);
    assert_eq!(h2.provenance["command"], "prune");

    let entries = manifest(dir)["entries"].as_array().unwrap().clone();
    let commands: Vec<&str> = entries.iter().map(|e| e["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["init", "train", "prune", "eval", "report"]);
    // each step consumes the checkpoint the previous one wrote
    assert_eq!(entries[1]["input_sha256"], entries[0]["output_sha256"]);
    assert_eq!(entries[2]["input_sha256"], entries[1]["output_sha256"]);

    let reports = dir.join("reports");
    for f in ["train_loss.csv", "prune_report.json", "prune_iterations.csv", "prune_layers.csv", "eval.json", "arch.csv"] {
        assert!(reports.join(f).is_file(), "{f} missing");
    }
    let iterations = std::fs::read_to_string(reports.join("prune_iterations.csv")).unwrap();
    assert_eq!(iterations.lines().count(), 4);
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(reports.join("eval.json")).unwrap()).unwrap();
    assert!(eval["perplexity"].as_f64().unwrap() > 1.0);
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&layerprune("init", dir, &[]));
    let out = layerprune("prune", dir, &["--sparsity", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity"));

    let out = layerprune("prune", dir, &["--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "sim_fn = \"hamming\"\n").unwrap();
    let out = layerprune("prune", dir, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim_fn"));
    // nothing was pruned
    assert!(!dir.join("checkpoints/step_1.apck").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = layerprune("eval", &tmp.path().join("empty"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sensitivity_and_accel_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&layerprune("init", dir, &[]));
    ok(&layerprune("sensitivity", dir, &[]));
    let sens = std::fs::read_to_string(dir.join("reports/sensitivity.csv")).unwrap();
    assert!(sens.starts_with("layer,sparsity,perplexity,baseline,delta"));
    assert_eq!(sens.lines().count(), 4);
    let imp = std::fs::read_to_string(dir.join("reports/importance.csv")).unwrap();
    assert!(imp.starts_with("layer,raw,normalized,sim_fn"));
    // the sweep leaves no checkpoint behind
    assert!(!dir.join("checkpoints/step_1.apck").exists());

    ok(&layerprune("accel", dir, &["--interleaves", "3", "--set", "accel_tokens=20000", "--set", "target_ratio=0.8"]));
    let (m, _) = load::<f32>(&dir.join("checkpoints/step_1.apck")).unwrap();
    let (src, _) = load::<f32>(&dir.join("checkpoints/step_0.apck")).unwrap();
    let target = 0.8 * src.param_count().total as f64;
    assert!((m.param_count().total as f64 - target).abs() <= 3.0 * 16.0);
    let iterations = std::fs::read_to_string(dir.join("reports/accel_iterations.csv")).unwrap();
    assert_eq!(iterations.lines().count(), 4);
    let schedule: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("reports/accel_schedule.json")).unwrap()).unwrap();
    assert_eq!(schedule["size_targets"].as_array().unwrap().len(), 3);
}

#[test]
fn run_root_env_resolves_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_layerprune"))
        .args(["init", "--run-dir", "nested/run", "--set", "hidden=16", "--set", "heads=2"])
        .env("LAYERPRUNE_RUN_ROOT", tmp.path())
        .output()
        .unwrap();
    ok(&out);
    let m: Model<f32> = load(&tmp.path().join("nested/run/checkpoints/step_0.apck")).unwrap().0;
    assert_eq!(m.config.hidden, 16);
}
