//! Exercises the `robustlab` binary: exit codes, validation diagnostics and
//! environment overrides.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use robustlab::harness::ExperimentConfig;

fn robustlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("ROBUSTLAB_OUTPUT_DIR")
        .env_remove("ROBUSTLAB_WORKERS")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

const TINY: &str = r#"output_dir = "out"
[dataset]
train_size = 40
test_size = 20
[sweep]
n = [20, 40]
seeds = 1
schedule = { epochs = 1, batch_size = 20 }
[[attacks]]
name = "pgd"
space = "image"
samples = 5
config = { iterations = 3, restarts = 1 }
"#;

#[test]
fn valid_config_echoes_a_reparseable_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", TINY);
    let out = robustlab(&["validate", &f], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = String::from_utf8(out.stdout).unwrap();
    let parsed = ExperimentConfig::from_toml(&echoed).unwrap();
    let original = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(parsed, original.effective());
    assert_eq!(parsed.effective(), parsed);
}

#[test]
fn negative_budget_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("iterations = 3,", "iterations = 3, epsilon = -1.0,");
    let f = write(dir.path(), "c.toml", &text);
    let out = robustlab(&["validate", &f], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 13"), "{err}");
}

#[test]
fn latent_mode_without_manifold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("seeds = 1", "seeds = 1\nmodes = [{ kind = \"on_manifold\" }]");
    let f = write(dir.path(), "c.toml", &text);
    let out = robustlab(&["validate", &f], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifold"));
}

#[test]
fn empty_sweep_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", &TINY.replace("n = [20, 40]", "n = []"));
    let out = robustlab(&["run", &f], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out/manifest.json").exists());
}

#[test]
fn unknown_verb_and_bad_flags_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(robustlab(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(robustlab(&["toy", "--p", "1.5"], dir.path()).status.code(), Some(1));
    assert_eq!(robustlab(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn toy_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = robustlab(&["toy", "--shifts", "0,6"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("x1,x2,shift,"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(text.contains("p(y=+1|x) = 0"));
}

#[test]
fn run_honours_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_robustlab"))
        .args(["run", &f])
        .current_dir(dir.path())
        .env("ROBUSTLAB_OUTPUT_DIR", "elsewhere")
        .env("ROBUSTLAB_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("elsewhere/metrics.csv").is_file());
    assert!(!dir.path().join("out").exists());
    let manifest = fs::read_to_string(dir.path().join("elsewhere/manifest.json")).unwrap();
    assert!(manifest.contains("\"workers\": 2"));
}

#[test]
fn dataset_train_attack_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(robustlab(&["generate", "--out", "d", "--train-size", "60", "--test-size", "20"], p).status.success());
    let out = robustlab(&["train", "--data", "d", "--n", "60", "--out", "m.rblab", "--epochs", "1", "--epochs-csv", "e.csv"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(p.join("e.csv")).unwrap().lines().count(), 2);
    for space in ["image", "latent", "transform", "cw"] {
        let out = robustlab(&["attack", "--model", "m.rblab", "--data", "d", "--space", space, "--samples", "10", "--iterations", "3"], p);
        assert!(out.status.success(), "{space}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8(out.stdout).unwrap().starts_with("index,label,"));
    }
    let out = robustlab(&["train", "--data", "d", "--n", "61", "--out", "x.rblab"], p);
    assert_eq!(out.status.code(), Some(1));
}
