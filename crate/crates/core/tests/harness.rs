//! End-to-end runs of the experiment harness on a tiny grid.

use std::fs;
use std::path::Path;

use robustlab::harness::{run, ExperimentConfig};

fn tiny(out: &Path, workers: usize) -> ExperimentConfig {
    let text = format!(
        r#"
output_dir = "{}"
master_seed = 7
workers = {workers}

[dataset]
train_size = 60
test_size = 30

[sweep]
n = [20, 40]
seeds = 1
modes = [{{ kind = "normal" }}, {{ kind = "on_manifold", manifold_attack = {{ iterations = 3 }} }}]
schedule = {{ epochs = 1, batch_size = 20 }}

[manifold]
kind = "true"

[[attacks]]
name = "pgd"
space = "image"
samples = 10
config = {{ iterations = 5, restarts = 1 }}

[[attacks]]
name = "onman"
space = "latent"
samples = 10
config = {{ iterations = 5, restarts = 1 }}

[histograms]
samples = 5
bins = 4
projection = {{ iterations = 10, random_restarts = 0 }}
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn grid_writes_outputs_and_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), 1);
    let first = run(&config).unwrap();
    assert_eq!(first.cells.len(), 4);
    assert_eq!(first.failed(), 0, "{:?}", first.cells);
    assert_eq!(first.cache_hits, 0);
    for f in ["metrics.csv", "manifest.json", "curve_on_manifold.csv", "curve_regular.csv", "curve_boost.csv", "curve_boost.svg", "distances.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let cell = dir.path().join("cells/normal-n40-s0");
    for f in ["epochs.csv", "attack_pgd.csv", "attack_onman.csv"] {
        assert!(cell.join(f).is_file(), "missing {f}");
    }
    let h = first.histograms.as_ref().expect("histograms");
    assert_eq!(h.cell, "normal-n40-s0");
    assert!(h.test_median.unwrap() >= 0.0);

    let manifest = fs::read(dir.path().join("manifest.json")).unwrap();
    let outputs = csv_files(dir.path());
    let second = run(&config).unwrap();
    assert_eq!(second.cache_hits, 4);
    assert_eq!(fs::read(dir.path().join("manifest.json")).unwrap(), manifest);
    assert_eq!(csv_files(dir.path()), outputs);
}

fn csv_files(root: &Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&tiny(a.path(), 1)).unwrap();
    let rb = run(&tiny(b.path(), 2)).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
}

#[test]
fn a_failing_cell_does_not_abort_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path(), 1);
    config.sweep.modes.truncate(1);
    let first = run(&config).unwrap();
    assert_eq!(first.failed(), 0);
    let model = first.cells.iter().find(|c| c.n == 40).unwrap().model_file.clone().unwrap();
    fs::write(dir.path().join(model), b"corrupt").unwrap();
    let r = run(&config).unwrap();
    assert_eq!(r.failed(), 1);
    let bad = r.cells.iter().find(|c| c.status != "ok").unwrap();
    assert_eq!(bad.n, 40);
    assert!(bad.error.is_some());
    assert_eq!(r.metrics.len(), 1);
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}

#[test]
fn cache_hits_only_when_the_trained_model_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path(), 1);
    config.sweep.modes.truncate(1);
    assert_eq!(run(&config).unwrap().cache_hits, 0);

    let mut attacks_only = config.clone();
    attacks_only.attacks[0].samples = 8;
    assert_eq!(run(&attacks_only).unwrap().cache_hits, 2);

    let mut longer = config.clone();
    longer.sweep.schedule.epochs = 2;
    assert_eq!(run(&longer).unwrap().cache_hits, 0);

    let mut reseeded = config.clone();
    reseeded.master_seed = 8;
    assert_eq!(run(&reseeded).unwrap().cache_hits, 0);

    assert_eq!(run(&config).unwrap().cache_hits, 2);
}

#[test]
fn every_metric_row_traces_back_to_its_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), 1);
    let r = run(&config).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["code_version"], robustlab::harness::CODE_VERSION);
    assert_eq!(manifest["config"]["master_seed"], 7);
    let listed = manifest["cells"].as_array().unwrap();
    assert_eq!(listed.len(), r.cells.len());
    for m in &r.metrics {
        let cell = r.cells.iter().find(|c| c.mode == m.mode && c.n == m.n && c.seed == m.seed).expect("cell for metric row");
        assert_eq!(cell.status, "ok");
        assert!(dir.path().join(cell.model_file.as_ref().unwrap()).is_file());
        assert!(dir.path().join(&cell.cell_dir).join("epochs.csv").is_file());
        assert!(listed.iter().any(|c| c["cell_dir"] == cell.cell_dir.as_str() && c["train_seed"] == cell.train_seed));
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("mode,N,seed,test_error,metric_name,metric_value"));
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (n, seed): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(r.cells.iter().any(|c| c.mode == f[0] && c.n == n && c.seed == seed), "{line}");
    }
}
