//! Experiment configuration: a TOML document with explicit defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, Norm};
use crate::defenses::{AttackSpec, SpaceKind, TrainingKind, TrainingMode, TrainingSchedule};
use crate::error::{Error, Result};
use crate::manifold::{ManifoldConfig, ProjectionConfig};
use crate::nn::ArchitectureKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    /// Grid cells trained concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub sweep: SweepSpec,
    /// Required by latent attacks and latent training modes.
    pub manifold: Option<ManifoldSpec>,
    #[serde(default = "default_suite")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub histograms: HistogramSpec,
    #[serde(default)]
    pub curves: CurveSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("robustlab-out")
}

fn one() -> usize {
    1
}

pub fn default_suite() -> Vec<AttackSpec> {
    vec![
        AttackSpec::new("pgd_linf", SpaceKind::Image, AttackConfig::linf(0.3), 200),
        AttackSpec::new("on_manifold", SpaceKind::Latent, AttackConfig::linf(0.3), 500),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub image_size: usize,
    /// Size of the training pool; every `N` of the sweep takes a prefix.
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Directory of per-class prototype images replacing the built-in glyphs.
    pub prototype_dir: Option<PathBuf>,
    /// Directory holding `train/` and `test/` datasets written by `generate`;
    /// overrides the synthetic settings above.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { image_size: 28, train_size: 4000, test_size: 1000, seed: 1, prototype_dir: None, path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n: Vec<usize>,
    #[serde(default = "three")]
    pub seeds: usize,
    #[serde(default = "conv_small")]
    pub architecture: ArchitectureKind,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub schedule: TrainingSchedule,
}

fn three() -> usize {
    3
}

fn conv_small() -> ArchitectureKind {
    ArchitectureKind::ConvSmall
}

fn default_modes() -> Vec<ModeSpec> {
    vec![ModeSpec::new(TrainingKind::Normal)]
}

/// Optional overrides of a training mode's inner attack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackOverrides {
    pub norm: Option<Norm>,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub restarts: Option<usize>,
    pub early_stop: Option<bool>,
}

impl AttackOverrides {
    fn apply(&self, base: &AttackConfig) -> AttackConfig {
        AttackConfig {
            norm: self.norm.unwrap_or(base.norm),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            iterations: self.iterations.unwrap_or(base.iterations),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            restarts: self.restarts.unwrap_or(base.restarts),
            early_stop: self.early_stop.unwrap_or(base.early_stop),
            seed: base.seed,
        }
    }

    fn full(c: &AttackConfig) -> Self {
        Self {
            norm: Some(c.norm),
            epsilon: Some(c.epsilon),
            iterations: Some(c.iterations),
            learning_rate: Some(c.learning_rate),
            restarts: Some(c.restarts),
            early_stop: Some(c.early_stop),
        }
    }
}

/// A training mode as written in the config; unspecified attack fields take
/// the mode's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub kind: TrainingKind,
    /// Label used in outputs; defaults to the kind's name.
    pub name: Option<String>,
    #[serde(default)]
    pub attack: AttackOverrides,
    #[serde(default)]
    pub manifold_attack: AttackOverrides,
    pub manifold_fraction: Option<f64>,
}

impl ModeSpec {
    pub fn new(kind: TrainingKind) -> Self {
        Self { kind, name: None, attack: AttackOverrides::default(), manifold_attack: AttackOverrides::default(), manifold_fraction: None }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn resolve(&self) -> TrainingMode {
        let base = TrainingMode::new(self.kind);
        TrainingMode {
            kind: self.kind,
            attack: self.attack.apply(&base.attack),
            manifold_attack: self.manifold_attack.apply(&base.manifold_attack),
            manifold_fraction: self.manifold_fraction.unwrap_or(base.manifold_fraction),
        }
    }

    fn effective(&self) -> Self {
        let m = self.resolve();
        Self {
            kind: self.kind,
            name: Some(self.label()),
            attack: AttackOverrides::full(&m.attack),
            manifold_attack: AttackOverrides::full(&m.manifold_attack),
            manifold_fraction: Some(m.manifold_fraction),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    /// The generating decoder with stored prototypes and poses.
    True,
    /// VAE-GANs trained on the training pool.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    ClassSpecific,
    ClassAgnostic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub scope: ScopeKind,
    pub config: ManifoldConfig,
    /// Leading training-pool examples used to fit learned manifolds.
    pub train_size: Option<usize>,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        Self { kind: ManifoldKind::True, scope: ScopeKind::ClassSpecific, config: ManifoldConfig::default(), train_size: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    pub enabled: bool,
    /// Test inputs projected per distribution.
    pub samples: usize,
    pub bins: usize,
    /// Attack whose examples form the regular distribution; defaults to the
    /// first image-space attack of the suite.
    pub regular_attack: Option<String>,
    /// Defaults to the first latent attack of the suite.
    pub on_manifold_attack: Option<String>,
    pub projection: ProjectionConfig,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { enabled: true, samples: 100, bins: 30, regular_attack: None, on_manifold_attack: None, projection: ProjectionConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSpec {
    pub svg: bool,
    pub regular_attack: Option<String>,
    pub on_manifold_attack: Option<String>,
}

impl Default for CurveSpec {
    fn default() -> Self {
        Self { svg: true, regular_attack: None, on_manifold_attack: None }
    }
}

/// A validation failure with the config line it refers to, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let mut line = e.span().map(|s| text[..s.start].lines().count().max(1));
            let unknown = e.message().strip_prefix("unknown field `").and_then(|r| r.split('`').next());
            if let (Some(key), Some(start)) = (unknown, line) {
                let rest: String = text.lines().skip(start - 1).collect::<Vec<_>>().join("\n");
                if let Some(k) = locate(&rest, None, key) {
                    line = Some(start - 1 + k);
                }
            }
            let d = Diagnostic { line, message: e.message().to_string() };
            Error::Config(d.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// The config with every default written out; parsing it yields an
    /// equal config.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.sweep.modes = c.sweep.modes.iter().map(ModeSpec::effective).collect();
        if c.histograms.regular_attack.is_none() {
            c.histograms.regular_attack = c.first_attack(false);
        }
        if c.histograms.on_manifold_attack.is_none() {
            c.histograms.on_manifold_attack = c.first_attack(true);
        }
        if c.curves.regular_attack.is_none() {
            c.curves.regular_attack = c.first_attack(false);
        }
        if c.curves.on_manifold_attack.is_none() {
            c.curves.on_manifold_attack = c.first_attack(true);
        }
        if let Some(m) = &mut c.manifold {
            m.train_size.get_or_insert(c.dataset.train_size);
        }
        c
    }

    fn first_attack(&self, latent: bool) -> Option<String> {
        let want = if latent { SpaceKind::Latent } else { SpaceKind::Image };
        self.attacks.iter().find(|a| a.space == want).map(|a| a.name.clone())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every setting; `source` (the config text) is used to attach
    /// line numbers.
    pub fn validate(&self, source: Option<&str>) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |anchor: Option<&str>, key: &str, message: String| {
            out.push(Diagnostic { line: source.and_then(|s| locate(s, anchor, key)), message });
        };
        if self.workers == 0 {
            err(None, "workers", "workers must be at least 1".into());
        }
        let d = &self.dataset;
        if d.path.is_none() {
            if d.image_size < 8 {
                err(None, "image_size", format!("image_size must be at least 8, got {}", d.image_size));
            }
            if d.train_size == 0 || d.test_size == 0 {
                err(None, "train_size", "train_size and test_size must be positive".into());
            }
            if let Some(p) = &d.prototype_dir {
                if !p.is_dir() {
                    err(None, "prototype_dir", format!("prototype directory {} does not exist", p.display()));
                }
            }
        } else if let Some(p) = &d.path {
            for sub in ["train", "test"] {
                if !p.join(sub).join("index.json").is_file() {
                    err(None, "path", format!("dataset {} has no {sub}/index.json", p.display()));
                }
            }
        }
        let s = &self.sweep;
        if s.n.is_empty() {
            err(None, "n", "the sweep needs at least one training-set size".into());
        }
        if d.path.is_none() {
            if let Some(&n) = s.n.iter().find(|&&n| n == 0 || n > d.train_size) {
                err(None, "n", format!("N = {n} is not in 1..={}", d.train_size));
            }
        }
        if s.seeds == 0 {
            err(None, "seeds", "at least one seed per cell is required".into());
        }
        if s.modes.is_empty() {
            err(None, "modes", "at least one training mode is required".into());
        }
        if let Err(e) = s.schedule.validate() {
            err(None, "epochs", e.to_string());
        }
        let mut labels = std::collections::HashSet::new();
        for m in &s.modes {
            let anchor = format!("\"{}\"", m.name.clone().unwrap_or_else(|| m.kind.name().to_string()));
            let anchor = Some(anchor.as_str());
            if !labels.insert(m.label()) {
                err(anchor, "kind", format!("duplicate mode label {:?}; set distinct names", m.label()));
            }
            if let Err(e) = m.resolve().validate() {
                err(anchor, "epsilon", format!("mode {}: {e}", m.label()));
            }
        }
        let latent_use = s.modes.iter().find(|m| m.kind.needs_latents()).map(|m| format!("mode {}", m.label())).or_else(|| {
            self.attacks.iter().find(|a| a.needs_latents()).map(|a| format!("attack {}", a.name))
        });
        match (&self.manifold, latent_use) {
            (None, Some(user)) => err(None, "kind", format!("{user} needs a [manifold] section")),
            (Some(m), _) => {
                if m.kind == ManifoldKind::Learned && m.config.arch_requires_28() && d.path.is_none() && d.image_size != 28 {
                    err(None, "arch", "convolutional learned manifolds require 28x28 images".into());
                }
                if m.train_size.is_some_and(|t| t < 2) {
                    err(None, "train_size", "learned manifolds need at least two training images".into());
                }
            }
            _ => {}
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attacks {
            let anchor = format!("\"{}\"", a.name);
            let anchor = Some(anchor.as_str());
            if !names.insert(a.name.clone()) {
                err(anchor, "name", format!("duplicate attack name {:?}", a.name));
            }
            if a.samples == 0 {
                err(anchor, "samples", format!("attack {}: samples must be positive", a.name));
            }
            if !(a.config.epsilon > 0.0) || !a.config.epsilon.is_finite() {
                err(anchor, "epsilon", format!("attack {}: epsilon must be positive, got {}", a.name, a.config.epsilon));
            } else if let Err(e) = a.config.validate() {
                err(anchor, "epsilon", format!("attack {}: {e}", a.name));
            }
            if a.config.iterations == 0 && !matches!(a.space, SpaceKind::RandomImage | SpaceKind::RandomLatent | SpaceKind::RandomTransform) {
                err(anchor, "iterations", format!("attack {}: iterations must be at least 1", a.name));
            }
        }
        let find = |name: &Option<String>, key: &str, err: &mut dyn FnMut(Option<&str>, &str, String)| {
            if let Some(n) = name {
                if !self.attacks.iter().any(|a| &a.name == n) {
                    err(None, key, format!("{key} refers to unknown attack {n:?}"));
                }
            }
        };
        find(&self.histograms.regular_attack, "regular_attack", &mut err);
        find(&self.histograms.on_manifold_attack, "on_manifold_attack", &mut err);
        find(&self.curves.regular_attack, "regular_attack", &mut err);
        find(&self.curves.on_manifold_attack, "on_manifold_attack", &mut err);
        if self.histograms.enabled && self.histograms.bins == 0 {
            err(None, "bins", "histograms need at least one bin".into());
        }
        if let Err(e) = std::fs::create_dir_all(&self.output_dir) {
            err(None, "output_dir", format!("cannot create output directory {}: {e}", self.output_dir.display()));
        }
        out
    }
}

impl ManifoldConfig {
    fn arch_requires_28(&self) -> bool {
        matches!(self.arch, crate::manifold::ManifoldArch::Conv { .. })
    }
}

/// Line (1-based) assigning `key`, searching from the first line that
/// contains `anchor` when given; keys inside inline tables are found too.
fn locate(source: &str, anchor: Option<&str>, key: &str) -> Option<usize> {
    let lines: Vec<&str> = source.lines().collect();
    let assigns = |l: &str| {
        l.match_indices(key).any(|(i, _)| {
            let before = l[..i].trim_end();
            let boundary = before.is_empty() || before.ends_with('{') || before.ends_with(',');
            boundary && l[i + key.len()..].trim_start().starts_with('=')
        })
    };
    let start = anchor.and_then(|a| lines.iter().position(|l| l.contains(a))).unwrap_or(0);
    lines[start..]
        .iter()
        .position(|l| assigns(l))
        .map(|i| start + i + 1)
        .or_else(|| lines.iter().position(|l| assigns(l)).map(|i| i + 1))
}
