//! `robustlab` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure (including runs with failed grid cells).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use robustlab::attacks::{self, AttackConfig, CwConfig, Norm};
use robustlab::defenses::{self, write_epoch_csv, AttackSpec, LatentSource, SpaceKind, TrainingData, TrainingKind, TrainingMode, TrainingSchedule};
use robustlab::fonts::{import_prototypes, train_test, PrototypeSet, SyntheticDataset, TrueDecoder, NUM_CLASSES};
use robustlab::harness::{self, ExperimentConfig, OUTPUT_DIR_ENV, WORKERS_ENV};
use robustlab::manifold::{project_decoder, Decoder, Histogram, ManifoldModel, ProjectionConfig};
use robustlab::nn::{ArchitectureKind, Classifier, Model};
use robustlab::toy::{self, TsiprasToy};

#[derive(Parser)]
#[command(name = "robustlab", version, about = "Adversarial robustness experiments on synthetic fonts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test dataset to a directory.
    Generate(GenerateArgs),
    /// Train one classifier on a generated dataset.
    Train(TrainArgs),
    /// Attack a trained classifier on the test split and write per-example results.
    Attack(AttackArgs),
    /// Project test images (and optionally PGD adversarials) onto the data manifold.
    Project(ProjectArgs),
    /// Evaluate the analytic toy distributions.
    Toy(ToyArgs),
    /// Execute an experiment config: training grid, attacks, histograms and curves.
    Run(ConfigArgs),
    /// Check a config and print it with every default expanded.
    Validate(ConfigArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    train_size: usize,
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 28)]
    image_size: usize,
    /// Directory with one subdirectory of glyph images per class, replacing the built-in prototypes.
    #[arg(long)]
    prototypes: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Leading training examples used.
    #[arg(long)]
    n: usize,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "conv_small")]
    arch: String,
    /// Training mode, e.g. normal, adv_half, on_manifold, adv_transform.
    #[arg(long, default_value = "normal")]
    mode: String,
    /// Budget of the mode's inner attack.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    epochs_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// image, latent, transform, cw, random_image, random_latent or random_transform.
    #[arg(long, default_value = "image")]
    space: String,
    /// linf or l2.
    #[arg(long, default_value = "linf")]
    norm: String,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 40)]
    iterations: usize,
    #[arg(long, default_value_t = 0.005)]
    learning_rate: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long)]
    no_early_stop: bool,
    /// Leading test inputs attacked.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-example CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Learned manifold model; the true generating decoder is used when omitted.
    #[arg(long)]
    manifold: Option<PathBuf>,
    /// Classifier whose L-infinity PGD adversarials are projected as well.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `distances.csv` and histogram CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    #[arg(long, default_value_t = 3.0)]
    eta: f64,
    /// Total dimension of the Gaussian-feature toy.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Shifts applied to the Gaussian coordinates.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]
    shifts: Vec<f64>,
    /// Support offset of the point-mass toy.
    #[arg(long, default_value_t = 1.0)]
    point_mass_epsilon: f64,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Concurrent grid cells, overriding the config.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<robustlab::error::Error> for Failure {
    fn from(e: robustlab::error::Error) -> Self {
        match e {
            robustlab::error::Error::Config(_) | robustlab::error::Error::InvalidArgument(_) => Failure::Validation(e.into()),
            e => Failure::Runtime(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Project(a) => project(a),
        Command::Toy(a) => run_toy(a),
        Command::Run(a) => run(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| invalid(format!("unknown {what} {s:?}")))
}

fn load_split(dir: &Path) -> Result<(SyntheticDataset, SyntheticDataset), Failure> {
    let train = SyntheticDataset::load(&dir.join("train")).with_context(|| format!("loading {}", dir.join("train").display()))?;
    let test = SyntheticDataset::load(&dir.join("test")).with_context(|| format!("loading {}", dir.join("test").display()))?;
    Ok((train, test))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let protos = match &a.prototypes {
        Some(d) => import_prototypes(d)?,
        None => PrototypeSet::builtin(a.image_size)?,
    };
    let (train, test) = train_test(Arc::new(protos), a.train_size, a.test_size, a.seed)?;
    train.save(&a.out.join("train"))?;
    test.save(&a.out.join("test"))?;
    println!("wrote {} training and {} test images to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let (pool, test) = load_split(&a.data)?;
    if a.n == 0 || a.n > pool.len() {
        return Err(invalid(format!("--n must be in 1..={}", pool.len())));
    }
    let arch: ArchitectureKind = a.arch.parse().map_err(|_| invalid(format!("unknown architecture {:?}", a.arch)))?;
    let kind: TrainingKind = a.mode.parse().map_err(|_| invalid(format!("unknown training mode {:?}", a.mode)))?;
    let mut mode = TrainingMode::new(kind);
    if let Some(eps) = a.epsilon {
        mode = mode.with_epsilon(eps);
    }
    mode.validate()?;
    let schedule = TrainingSchedule { epochs: a.epochs, batch_size: a.batch_size, learning_rate: a.learning_rate, ..TrainingSchedule::default() };
    schedule.validate()?;
    let data_set = pool.take(a.n);
    let rows: Vec<usize> = (0..a.n).collect();
    let decoder = TrueDecoder::for_examples(&data_set, &rows);
    let z = data_set.pose_tensor(&rows);
    let mut data = TrainingData::new(&data_set.images, &data_set.labels);
    data.test = Some((&test.images, &test.labels));
    if kind.needs_latents() {
        data.latents = Some(LatentSource::PerExample { decoder: &decoder, z: &z });
    }
    let model = Classifier::build(arch, &data_set.images.shape()[1..], NUM_CLASSES, a.seed)?;
    let outcome = defenses::train(model, &data, &mode, &schedule, a.seed)?;
    outcome.classifier.save(&a.out)?;
    if let Some(p) = &a.epochs_csv {
        let mut w = create(p)?;
        write_epoch_csv(&outcome.epochs, &mut w)?;
        w.flush().context("writing epochs CSV")?;
    }
    let err = defenses::evaluate(&outcome.classifier, &test.images, &test.labels)?;
    println!("test_error={err:.4} model={}", a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<(), Failure> {
    let model = Classifier::load(&a.model)?;
    let (_, test) = load_split(&a.data)?;
    let space: SpaceKind = parse_name("attack space", &a.space)?;
    let norm: Norm = parse_name("norm", &a.norm)?;
    let config = AttackConfig {
        norm,
        epsilon: a.epsilon,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        restarts: a.restarts,
        early_stop: !a.no_early_stop,
        seed: a.seed,
    };
    config.validate()?;
    let mut spec = AttackSpec::new(&a.space, space, config, a.samples);
    spec.cw = CwConfig::default();
    let rows: Vec<usize> = (0..test.len()).collect();
    let decoder = TrueDecoder::for_examples(&test, &rows);
    let z = test.pose_tensor(&rows);
    let latents = Some(LatentSource::PerExample { decoder: &decoder, z: &z });
    let profile = defenses::robustness_profile(&model, &test.images, &test.labels, latents, std::slice::from_ref(&spec))?;
    let m = &profile.attacks[0];
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            attacks::write_csv(&m.records, &mut w)?;
            w.flush().context("writing attack CSV")?;
        }
        None => attacks::write_csv(&m.records, &mut std::io::stdout().lock())?,
    }
    let rate = m.success_rate.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    eprintln!("test_error={:.4} eligible={} successes={} success_rate={rate}", profile.test_error, m.eligible, m.successes);
    Ok(())
}

fn project(a: ProjectArgs) -> Result<(), Failure> {
    let (_, test) = load_split(&a.data)?;
    let k = a.samples.min(test.len());
    let rows: Vec<usize> = (0..k).collect();
    let cfg = ProjectionConfig { iterations: a.iterations, seed: a.seed, ..ProjectionConfig::default() };
    let learned = a.manifold.as_ref().map(|p| ManifoldModel::load(p)).transpose()?;
    let true_dec = TrueDecoder::for_examples(&test, &rows);
    let true_z = test.pose_tensor(&rows);
    let distances = |x: &robustlab::tensor::Tensor, idx: &[usize]| -> Result<Vec<f64>, Failure> {
        if idx.is_empty() {
            return Ok(Vec::new());
        }
        let res = match &learned {
            Some(m) => project_decoder(x, m, &[m.encode_clamped(x)?], &cfg)?,
            None => {
                let dec = true_dec.select(idx)?;
                project_decoder(x, dec.as_ref(), &[true_z.select_rows(idx)], &cfg)?
            }
        };
        Ok(res.into_iter().map(|r| r.distance).collect())
    };
    let images = test.images.select_rows(&rows);
    let mut sets = vec![("test", rows.clone(), distances(&images, &rows)?)];
    if let Some(path) = &a.model {
        let model = Classifier::load(path)?;
        let pred = model.predict(&images)?;
        let ok: Vec<usize> = rows.iter().copied().filter(|&i| pred[i] == test.labels[i]).collect();
        let x = images.select_rows(&ok);
        let y: Vec<usize> = ok.iter().map(|&i| test.labels[i]).collect();
        let cfg = AttackConfig { seed: a.seed, ..AttackConfig::linf(a.epsilon) };
        let res = attacks::pgd_attack(&model, &x, &y, &ok, &cfg)?;
        let hits: Vec<usize> = (0..ok.len()).filter(|&j| res[j].success).collect();
        let shape = &images.shape()[1..];
        let adv = robustlab::tensor::Tensor::stack_rows(shape, hits.iter().map(|&j| res[j].adversarial.as_slice()))?;
        let idx: Vec<usize> = hits.iter().map(|&j| ok[j]).collect();
        sets.push(("regular", idx.clone(), distances(&adv, &idx)?));
    }
    fs::create_dir_all(&a.out).context("creating output directory")?;
    let mut w = create(&a.out.join("distances.csv"))?;
    writeln!(w, "kind,index,distance").context("writing distances")?;
    for (kind, idx, d) in &sets {
        for (i, v) in idx.iter().zip(d) {
            writeln!(w, "{kind},{i},{v}").context("writing distances")?;
        }
    }
    w.flush().context("writing distances")?;
    let all: Vec<f64> = sets.iter().flat_map(|s| s.2.iter().copied()).collect();
    let range = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for (kind, _, d) in &sets {
        if d.is_empty() {
            continue;
        }
        let h = Histogram::new(d, a.bins, Some(range))?;
        let mut w = create(&a.out.join(format!("hist_{kind}.csv")))?;
        h.write_csv(&mut w)?;
        w.flush().context("writing histogram")?;
        let mut s = d.clone();
        s.sort_by(f64::total_cmp);
        println!("{kind}: n={} median_distance={:.4}", s.len(), s[s.len() / 2]);
    }
    Ok(())
}

fn run_toy(a: ToyArgs) -> Result<(), Failure> {
    let t = TsiprasToy { p: a.p, eta: a.eta, dim: a.dim };
    t.validate()?;
    let rows = toy::defense_of_definition_report(&t, &a.shifts)?;
    let mut out = std::io::stdout().lock();
    toy::write_report_csv(&rows, &mut out)?;
    let v = toy::point_mass_validity(a.point_mass_epsilon, -1, a.point_mass_epsilon)?;
    writeln!(
        out,
        "# point mass at x = {e}: p(y=+1|x) = {p}, label of y=-1 preserved: {inv}",
        e = a.point_mass_epsilon,
        p = v.posteriors.map_or("undefined".into(), |p| p.0.to_string()),
        inv = v.label_invariant.map_or("undefined".into(), |b| b.to_string())
    )
    .context("writing report")?;
    Ok(())
}

fn load_config(a: &ConfigArgs) -> Result<(ExperimentConfig, String), Failure> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(d) = &a.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(w) = a.workers {
        config.workers = w;
    }
    Ok((config, text))
}

fn check(config: &ExperimentConfig, text: &str) -> Result<(), Failure> {
    let diags = config.validate(Some(text));
    if diags.is_empty() {
        return Ok(());
    }
    for d in &diags {
        eprintln!("{d}");
    }
    Err(invalid(format!("{} problem(s) in config", diags.len())))
}

fn validate(a: ConfigArgs) -> Result<(), Failure> {
    let (config, text) = load_config(&a)?;
    check(&config, &text)?;
    print!("{}", config.effective().to_toml()?);
    Ok(())
}

fn run(a: ConfigArgs) -> Result<(), Failure> {
    let (config, text) = load_config(&a)?;
    check(&config, &text)?;
    let artifact = harness::run(&config)?;
    for c in artifact.cells.iter().filter(|c| c.status != "ok") {
        eprintln!("cell {}-n{}-s{} failed: {}", c.mode, c.n, c.seed, c.error.as_deref().unwrap_or("unknown error"));
    }
    println!(
        "{} cells ({} from cache, {} failed); outputs in {}",
        artifact.cells.len(),
        artifact.cache_hits,
        artifact.failed(),
        artifact.output_dir.display()
    );
    if artifact.failed() > 0 {
        return Err(Failure::Runtime(anyhow!("{} grid cell(s) failed", artifact.failed())));
    }
    Ok(())
}
