//! Declarative experiment runner: dataset preparation, the training grid
//! over training-set sizes, modes and seeds, attack suites, distance
//! histograms and curve emission, with a content-addressed model cache.

mod config;
mod curves;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks;
use crate::defenses::{self, write_epoch_csv, EpochMetrics, LatentSource, RobustnessProfile, TrainingData, TrainingMode};
use crate::error::{bail, Error, Result};
use crate::fonts::{import_prototypes, train_test, PrototypeSet, SyntheticDataset, TrueDecoder};
use crate::manifold::{project_decoder, train_manifold, Decoder, Histogram, ManifoldModel, Scope};
use crate::nn::Classifier;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub use config::{
    default_suite, AttackOverrides, CurveSpec, DatasetSpec, Diagnostic, ExperimentConfig, HistogramSpec, ManifoldKind,
    ManifoldSpec, ModeSpec, ScopeKind, SweepSpec,
};
pub use curves::{curve_rows, curve_svg, emit_curves, mean, sample_std, write_curve_csv, CellMetrics, CurveKind, CurveRow};

/// Recorded in manifests and cache keys.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const OUTPUT_DIR_ENV: &str = "ROBUSTLAB_OUTPUT_DIR";
pub const WORKERS_ENV: &str = "ROBUSTLAB_WORKERS";

/// Apply `ROBUSTLAB_OUTPUT_DIR` and `ROBUSTLAB_WORKERS`.
pub fn apply_env_overrides(config: &mut ExperimentConfig) -> Result<()> {
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        config.workers = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {w:?}")))?;
    }
    Ok(())
}

/// Training pool and test split.
pub fn load_datasets(spec: &DatasetSpec) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if let Some(p) = &spec.path {
        return Ok((SyntheticDataset::load(&p.join("train"))?, SyntheticDataset::load(&p.join("test"))?));
    }
    let protos = match &spec.prototype_dir {
        Some(d) => import_prototypes(d)?,
        None => PrototypeSet::builtin(spec.image_size)?,
    };
    train_test(Arc::new(protos), spec.train_size, spec.test_size, spec.seed)
}

/// Latent codes and decoders for the training pool and test split.
pub enum Manifold {
    True { train: TrueDecoder, test: TrueDecoder, train_z: Tensor, test_z: Tensor },
    /// One model per class (class-specific) or a single shared model.
    Learned { models: Vec<ManifoldModel>, train_z: Tensor, test_z: Tensor },
}

impl Manifold {
    fn decoders(models: &[ManifoldModel]) -> Vec<&dyn Decoder> {
        models.iter().map(|m| m as &dyn Decoder).collect()
    }

    fn train_z(&self) -> &Tensor {
        match self {
            Manifold::True { train_z, .. } | Manifold::Learned { train_z, .. } => train_z,
        }
    }
}

fn encode_by_class(models: &[ManifoldModel], images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let d = models[0].latent_dim();
    let mut z = Tensor::zeros(&[images.rows(), d]);
    if models.len() == 1 {
        return models[0].encode_clamped(images);
    }
    for (c, m) in models.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let zc = m.encode_clamped(&images.select_rows(&rows))?;
        for (k, &r) in rows.iter().enumerate() {
            z.row_mut(r).copy_from_slice(zc.row(k));
        }
    }
    Ok(z)
}

fn hash_json(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..12]))
}

/// Build (or load from the cache) the manifold described by `spec`.
pub fn prepare_manifold(
    spec: &ManifoldSpec,
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    master_seed: u64,
    cache: &Path,
) -> Result<Manifold> {
    match spec.kind {
        ManifoldKind::True => {
            let all: Vec<usize> = (0..train.len()).collect();
            let tall: Vec<usize> = (0..test.len()).collect();
            Ok(Manifold::True {
                train: TrueDecoder::for_examples(train, &all),
                test: TrueDecoder::for_examples(test, &tall),
                train_z: train.pose_tensor(&all),
                test_z: test.pose_tensor(&tall),
            })
        }
        ManifoldKind::Learned => {
            let pool = train.take(spec.train_size.unwrap_or(train.len()));
            let scopes: Vec<Scope> = match spec.scope {
                ScopeKind::ClassSpecific => (0..crate::fonts::NUM_CLASSES).map(|c| Scope::ClassSpecific { class_id: c }).collect(),
                ScopeKind::ClassAgnostic => vec![Scope::ClassAgnostic],
            };
            let mut models = Vec::with_capacity(scopes.len());
            for (i, scope) in scopes.into_iter().enumerate() {
                let mut cfg = spec.config.clone();
                cfg.seed = derive_seed(master_seed, "manifold", i as u64);
                let key = hash_json(&(CODE_VERSION, "manifold", &cfg, &scope, pool.len(), pool.seed, &pool.labels))?;
                let path = cache.join(format!("manifold-{key}.rblab"));
                let model = if path.is_file() {
                    ManifoldModel::load(&path)?
                } else {
                    let (rows, held): (Vec<usize>, Vec<usize>) = match scope {
                        Scope::ClassSpecific { class_id } => (
                            (0..pool.len()).filter(|&k| pool.labels[k] == class_id).collect(),
                            (0..test.len()).filter(|&k| test.labels[k] == class_id).take(100).collect(),
                        ),
                        Scope::ClassAgnostic => ((0..pool.len()).collect(), (0..test.len().min(200)).collect()),
                    };
                    let (m, _) = train_manifold(&pool.images.select_rows(&rows), &test.images.select_rows(&held), scope, &cfg)?;
                    m.save(&path)?;
                    m
                };
                models.push(model);
            }
            let train_z = encode_by_class(&models, &train.images, &train.labels)?;
            let test_z = encode_by_class(&models, &test.images, &test.labels)?;
            Ok(Manifold::Learned { models, train_z, test_z })
        }
    }
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub mode: String,
    pub n: usize,
    pub seed: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    /// Model file relative to the output directory.
    pub model_file: Option<String>,
    pub cell_dir: String,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'a str,
    config: &'a ExperimentConfig,
    cells: &'a [CellReport],
    histograms: Option<&'a HistogramSummary>,
    curves: Vec<String>,
}

/// Medians of the three distance distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub cell: String,
    pub regular_median: Option<f64>,
    pub on_manifold_median: Option<f64>,
    pub test_median: Option<f64>,
}

/// What a run produced.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub output_dir: PathBuf,
    pub cells: Vec<CellReport>,
    pub metrics: Vec<CellMetrics>,
    pub cache_hits: usize,
    pub histograms: Option<HistogramSummary>,
}

impl RunArtifact {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status != "ok").count()
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    train: &'a SyntheticDataset,
    test: &'a SyntheticDataset,
    manifold: Option<&'a Manifold>,
    out: &'a Path,
}

struct CellOutcome {
    report: CellReport,
    metrics: Option<CellMetrics>,
    profile: Option<RobustnessProfile>,
    cached: bool,
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Training-set latents restricted to the first `n` examples.
fn train_latents<'a>(m: &'a Manifold, n: usize, holder: &'a mut Option<(Box<dyn Decoder>, Tensor)>, decs: &'a mut Vec<&'a dyn Decoder>) -> Result<LatentSource<'a>> {
    let rows: Vec<usize> = (0..n).collect();
    match m {
        Manifold::True { train, train_z, .. } => {
            *holder = Some((train.select(&rows)?, train_z.select_rows(&rows)));
            let (d, z) = holder.as_ref().expect("just set");
            Ok(LatentSource::PerExample { decoder: d.as_ref(), z })
        }
        Manifold::Learned { models, train_z, .. } => {
            *holder = Some((models[0].select(&[])?, train_z.select_rows(&rows)));
            let (_, z) = holder.as_ref().expect("just set");
            if models.len() == 1 {
                Ok(LatentSource::Shared { decoder: &models[0], z })
            } else {
                *decs = Manifold::decoders(models);
                Ok(LatentSource::PerClass { decoders: decs.as_slice(), z })
            }
        }
    }
}

fn test_latents<'a>(m: &'a Manifold, decs: &'a mut Vec<&'a dyn Decoder>) -> LatentSource<'a> {
    match m {
        Manifold::True { test, test_z, .. } => LatentSource::PerExample { decoder: test, z: test_z },
        Manifold::Learned { models, test_z, .. } => {
            if models.len() == 1 {
                LatentSource::Shared { decoder: &models[0], z: test_z }
            } else {
                *decs = Manifold::decoders(models);
                LatentSource::PerClass { decoders: decs.as_slice(), z: test_z }
            }
        }
    }
}

fn cell_name(mode: &str, n: usize, seed: usize) -> String {
    format!("{mode}-n{n}-s{seed}")
}

fn run_cell(ctx: &Context<'_>, spec: &ModeSpec, n: usize, seed: usize, keep_profile: bool) -> CellOutcome {
    let c = ctx.config;
    let mode = spec.label();
    let init_seed = derive_seed(c.master_seed, "init", seed as u64);
    let train_seed = derive_seed(c.master_seed, "train", seed as u64);
    let name = cell_name(&mode, n, seed);
    let mut report = CellReport {
        mode: mode.clone(),
        n,
        seed,
        init_seed,
        train_seed,
        model_file: None,
        cell_dir: format!("cells/{name}"),
        status: "ok".into(),
        error: None,
    };
    let mut cached = false;
    let mut profile_out = None;
    let result = (|| -> Result<CellMetrics> {
        let resolved: TrainingMode = spec.resolve();
        let manifold_key = if resolved.kind.needs_latents() { c.manifold.as_ref() } else { None };
        let key = hash_json(&(CODE_VERSION, &c.dataset, n, init_seed, train_seed, &c.sweep.architecture, &resolved, &c.sweep.schedule, manifold_key))?;
        let model_rel = format!("models/{key}.rblab");
        let model_path = ctx.out.join(&model_rel);
        let epochs_path = ctx.out.join(format!("models/{key}.epochs.json"));
        report.model_file = Some(model_rel);
        let (classifier, epochs): (Classifier, Vec<EpochMetrics>) = if model_path.is_file() && epochs_path.is_file() {
            cached = true;
            (Classifier::load(&model_path)?, serde_json::from_str(&fs::read_to_string(&epochs_path)?)?)
        } else {
            let train = ctx.train.take(n);
            if train.len() < n {
                bail!(InvalidArgument, "N = {n} exceeds the {} available training examples", ctx.train.len());
            }
            let mut data = TrainingData::new(&train.images, &train.labels);
            data.test = Some((&ctx.test.images, &ctx.test.labels));
            let mut holder = None;
            let mut decs = Vec::new();
            if resolved.kind.needs_latents() {
                let m = ctx.manifold.ok_or_else(|| Error::Config(format!("mode {mode} needs a manifold")))?;
                data.latents = Some(train_latents(m, n, &mut holder, &mut decs)?);
            }
            let model = Classifier::build(c.sweep.architecture.clone(), &train.images.shape()[1..], crate::fonts::NUM_CLASSES, init_seed)?;
            let outcome = defenses::train(model, &data, &resolved, &c.sweep.schedule, train_seed)?;
            outcome.classifier.save(&model_path)?;
            fs::write(&epochs_path, serde_json::to_string(&outcome.epochs)?)?;
            (outcome.classifier, outcome.epochs)
        };
        let dir = ctx.out.join(&report.cell_dir);
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("epochs.csv"), |w| write_epoch_csv(&epochs, w))?;
        let suite: Vec<_> = c
            .attacks
            .iter()
            .map(|a| {
                let mut a = a.clone();
                a.config.seed = derive_seed(c.master_seed, &format!("attack/{}", a.name), seed as u64);
                a
            })
            .collect();
        let mut decs = Vec::new();
        let latents = ctx.manifold.map(|m| test_latents(m, &mut decs));
        let profile = defenses::robustness_profile(&classifier, &ctx.test.images, &ctx.test.labels, latents, &suite)?;
        let mut metrics = BTreeMap::new();
        for a in &profile.attacks {
            write_file(&dir.join(format!("attack_{}.csv", a.name)), |w| attacks::write_csv(&a.records, w))?;
            if let Some(r) = a.success_rate {
                metrics.insert(format!("{}.success_rate", a.name), r);
            }
            if let Some(m) = a.mean_norm {
                metrics.insert(format!("{}.mean_norm", a.name), m);
            }
        }
        let cm = CellMetrics { mode: mode.clone(), n, seed, test_error: profile.test_error, metrics };
        if keep_profile {
            profile_out = Some(profile);
        }
        Ok(cm)
    })();
    match result {
        Ok(m) => CellOutcome { report, metrics: Some(m), profile: profile_out, cached },
        Err(e) => {
            report.status = "failed".into();
            report.error = Some(e.to_string());
            CellOutcome { report, metrics: None, profile: None, cached }
        }
    }
}

/// Project `images` (rows of the test split `rows`) onto the manifold and
/// return the distances.
fn manifold_distances(ctx: &Context<'_>, m: &Manifold, images: &Tensor, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &ctx.config.histograms.projection;
    let results = match m {
        Manifold::True { test, test_z, .. } => {
            let dec = test.select(rows)?;
            project_decoder(images, dec.as_ref(), &[test_z.select_rows(rows)], cfg)?
        }
        Manifold::Learned { models, .. } => {
            let labels: Vec<usize> = rows.iter().map(|&r| ctx.test.labels[r]).collect();
            let mut out = vec![0.0; rows.len()];
            let groups: Vec<(usize, Vec<usize>)> = if models.len() == 1 {
                vec![(0, (0..rows.len()).collect())]
            } else {
                (0..models.len()).map(|c| (c, (0..rows.len()).filter(|&k| labels[k] == c).collect())).collect()
            };
            for (c, pos) in groups.into_iter().filter(|(_, p)| !p.is_empty()) {
                let x = images.select_rows(&pos);
                let start = models[c].encode_clamped(&x)?;
                for (k, r) in pos.iter().zip(project_decoder(&x, &models[c], &[start], cfg)?) {
                    out[*k] = r.distance;
                }
            }
            return Ok(out);
        }
    };
    Ok(results.into_iter().map(|r| r.distance).collect())
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[k] } else { 0.5 * (s[k - 1] + s[k]) })
}

fn emit_histograms(ctx: &Context<'_>, m: &Manifold, cell: &str, profile: &RobustnessProfile) -> Result<HistogramSummary> {
    let h = &ctx.config.histograms;
    let shape = &ctx.test.images.shape()[1..];
    let adversarial = |name: &Option<String>| -> Result<(Tensor, Vec<usize>)> {
        let Some(a) = name.as_ref().and_then(|n| profile.attacks.iter().find(|a| &a.name == n)) else {
            return Ok((Tensor::zeros(&[0]), Vec::new()));
        };
        let recs: Vec<_> = a.records.iter().filter(|r| r.result.success).take(h.samples).collect();
        let rows = recs.iter().map(|r| r.index).collect();
        Ok((Tensor::stack_rows(shape, recs.iter().map(|r| r.result.adversarial.as_slice()))?, rows))
    };
    let (reg_x, reg_rows) = adversarial(&h.regular_attack)?;
    let (on_x, on_rows) = adversarial(&h.on_manifold_attack)?;
    let test_rows: Vec<usize> = (0..h.samples.min(ctx.test.len())).collect();
    let sets = [
        ("regular", manifold_distances(ctx, m, &reg_x, &reg_rows)?, &reg_rows),
        ("on_manifold", manifold_distances(ctx, m, &on_x, &on_rows)?, &on_rows),
        ("test", manifold_distances(ctx, m, &ctx.test.images.select_rows(&test_rows), &test_rows)?, &test_rows),
    ];
    let all: Vec<f64> = sets.iter().flat_map(|s| s.1.iter().copied()).collect();
    let range = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    write_file(&ctx.out.join("distances.csv"), |w| {
        writeln!(w, "kind,index,distance")?;
        for (kind, d, rows) in &sets {
            for (dist, idx) in d.iter().zip(rows.iter()) {
                writeln!(w, "{kind},{idx},{dist}")?;
            }
        }
        Ok(())
    })?;
    for (kind, d, _) in &sets {
        if d.is_empty() {
            continue;
        }
        let hist = Histogram::new(d, h.bins, Some(range))?;
        write_file(&ctx.out.join(format!("hist_{kind}.csv")), |w| hist.write_csv(w))?;
    }
    Ok(HistogramSummary {
        cell: cell.to_string(),
        regular_median: median(&sets[0].1),
        on_manifold_median: median(&sets[1].1),
        test_median: median(&sets[2].1),
    })
}

/// Execute the full grid. The config should be validated first; cell
/// failures are recorded in the manifest rather than aborting the run.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifact> {
    let config = config.effective();
    let diags = config.validate(None);
    if let Some(d) = diags.first() {
        return Err(Error::Config(d.to_string()));
    }
    let out = config.output_dir.clone();
    fs::create_dir_all(out.join("models"))?;
    fs::create_dir_all(out.join("cells"))?;
    let (train, test) = load_datasets(&config.dataset)?;
    let manifold = match &config.manifold {
        Some(spec) => Some(prepare_manifold(spec, &train, &test, config.master_seed, &out.join("models"))?),
        None => None,
    };
    if let Some(m) = &manifold {
        if m.train_z().rows() != train.len() {
            bail!(Shape, "manifold codes do not cover the training pool");
        }
    }
    let ctx = Context { config: &config, train: &train, test: &test, manifold: manifold.as_ref(), out: &out };
    let n_max = *config.sweep.n.iter().max().expect("validated non-empty sweep");
    let mut jobs = Vec::new();
    for (mi, spec) in config.sweep.modes.iter().enumerate() {
        for &n in &config.sweep.n {
            for seed in 0..config.sweep.seeds {
                jobs.push((spec, n, seed, mi == 0 && n == n_max && seed == 0));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| jobs.par_iter().map(|&(s, n, seed, keep)| run_cell(&ctx, s, n, seed, keep)).collect());

    let cache_hits = outcomes.iter().filter(|o| o.cached).count();
    let metrics: Vec<CellMetrics> = outcomes.iter().filter_map(|o| o.metrics.clone()).collect();
    let cells: Vec<CellReport> = outcomes.iter().map(|o| o.report.clone()).collect();

    let mut histograms = None;
    if config.histograms.enabled {
        if let (Some(m), Some(o)) = (&manifold, outcomes.iter().find(|o| o.profile.is_some())) {
            let name = cell_name(&o.report.mode, o.report.n, o.report.seed);
            histograms = Some(emit_histograms(&ctx, m, &name, o.profile.as_ref().expect("checked"))?);
        }
    }

    write_file(&out.join("metrics.csv"), |w| {
        let mut names: Vec<String> = vec!["test_error".into()];
        for m in &metrics {
            for k in m.metrics.keys() {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
        writeln!(w, "mode,N,seed,test_error,metric_name,metric_value")?;
        for m in &metrics {
            for name in &names {
                let v = if name == "test_error" { Some(m.test_error) } else { m.metrics.get(name).copied() };
                if let Some(v) = v {
                    writeln!(w, "{},{},{},{},{},{}", m.mode, m.n, m.seed, m.test_error, name, v)?;
                }
            }
        }
        Ok(())
    })?;

    let mut curves = Vec::new();
    if metrics.len() >= 2 {
        let c = &config.curves;
        let mut emit = |metric: String, kind: CurveKind| -> Result<()> {
            emit_curves(&metrics, &metric, kind, &out, c.svg)?;
            curves.push(format!("{}.csv", kind.file_stem()));
            Ok(())
        };
        if let Some(a) = &c.on_manifold_attack {
            emit(format!("{a}.success_rate"), CurveKind::OnManifold)?;
        }
        if let Some(a) = &c.regular_attack {
            emit(format!("{a}.success_rate"), CurveKind::Regular)?;
        }
        emit("test_error".into(), CurveKind::Boost)?;
    }

    let manifest = Manifest { code_version: CODE_VERSION, config: &config, cells: &cells, histograms: histograms.as_ref(), curves };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunArtifact { output_dir: out, cells, metrics, cache_hits, histograms })
}
