//! Training loops: normal training, adversarial training variants and their
//! random baselines, plus evaluation and robustness profiles.

mod profile;

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackResult, Threat};
use crate::autodiff::{Reduction, Tape};
use crate::error::{bail, Error, Result};
use crate::manifold::Decoder;
use crate::nn::{step_network, Classifier, Mode, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub use profile::{robustness_profile, AttackMetrics, AttackSpec, RobustnessProfile, SpaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    Normal,
    /// Half of every batch replaced by adversarial examples.
    AdvHalf,
    /// Every input replaced by its adversarial example.
    AdvFull,
    /// Like `AdvHalf`, but the inner attack stops at the first label change.
    AdvWeak,
    /// Half of every batch replaced by on-manifold adversarial examples.
    OnManifold,
    /// Half of every batch replaced by adversarially transformed inputs.
    AdvTransform,
    /// Half of every batch perturbed by a mix of regular and on-manifold
    /// attacks, split by `TrainingMode::manifold_fraction`.
    Combined,
    RandomImage,
    RandomLatent,
    /// Data augmentation with random pose offsets.
    RandomTransform,
}

impl TrainingKind {
    pub const ALL: [TrainingKind; 10] = [
        TrainingKind::Normal,
        TrainingKind::AdvHalf,
        TrainingKind::AdvFull,
        TrainingKind::AdvWeak,
        TrainingKind::OnManifold,
        TrainingKind::AdvTransform,
        TrainingKind::Combined,
        TrainingKind::RandomImage,
        TrainingKind::RandomLatent,
        TrainingKind::RandomTransform,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainingKind::Normal => "normal",
            TrainingKind::AdvHalf => "adv_half",
            TrainingKind::AdvFull => "adv_full",
            TrainingKind::AdvWeak => "adv_weak",
            TrainingKind::OnManifold => "on_manifold",
            TrainingKind::AdvTransform => "adv_transform",
            TrainingKind::Combined => "combined",
            TrainingKind::RandomImage => "random_image",
            TrainingKind::RandomLatent => "random_latent",
            TrainingKind::RandomTransform => "random_transform",
        }
    }

    /// Whether the mode perturbs latent codes and so needs a decoder.
    pub fn needs_latents(&self) -> bool {
        matches!(self, TrainingKind::OnManifold | TrainingKind::RandomLatent | TrainingKind::Combined)
    }
}

impl std::fmt::Display for TrainingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match TrainingKind::ALL.iter().find(|k| k.name() == s) {
            Some(k) => Ok(*k),
            None => bail!(InvalidArgument, "unknown training mode {s:?}"),
        }
    }
}

/// A training mode together with its inner attack budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMode {
    pub kind: TrainingKind,
    /// Image-space, pose-space or latent-space attack, depending on `kind`.
    pub attack: AttackConfig,
    /// Latent attack of `Combined` training.
    pub manifold_attack: AttackConfig,
    /// Share of the perturbed inputs crafted on the manifold in `Combined`.
    pub manifold_fraction: f64,
}

impl Default for TrainingMode {
    fn default() -> Self {
        Self::new(TrainingKind::Normal)
    }
}

impl TrainingMode {
    /// Default budgets for `kind`: one restart of 40 full iterations, L-inf
    /// radius 0.3 in image, latent or pose space.
    pub fn new(kind: TrainingKind) -> Self {
        let base = AttackConfig { restarts: 1, early_stop: kind == TrainingKind::AdvWeak, ..AttackConfig::linf(0.3) };
        Self { kind, attack: base.clone(), manifold_attack: base, manifold_fraction: 0.5 }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.attack.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TrainingKind::Normal {
            return Ok(());
        }
        self.attack.validate()?;
        if self.kind == TrainingKind::Combined {
            self.manifold_attack.validate()?;
            if !(0.0..=1.0).contains(&self.manifold_fraction) {
                bail!(InvalidArgument, "manifold_fraction must lie in [0, 1], got {}", self.manifold_fraction);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub weight_decay: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 100, learning_rate: 0.01, decay: 0.95, weight_decay: 1e-4 }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(InvalidArgument, "epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.decay > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(InvalidArgument, "learning rate and decay must be positive, weight decay non-negative");
        }
        Ok(())
    }
}

/// Latent codes of the training set and the decoders that map them back.
#[derive(Clone, Copy)]
pub enum LatentSource<'a> {
    /// Row `i` of `decoder` belongs to example `i` (the true manifold with
    /// stored prototypes and poses).
    PerExample { decoder: &'a dyn Decoder, z: &'a Tensor },
    /// One decoder for all classes.
    Shared { decoder: &'a dyn Decoder, z: &'a Tensor },
    /// One decoder per class, indexed by label.
    PerClass { decoders: &'a [&'a dyn Decoder], z: &'a Tensor },
}

impl LatentSource<'_> {
    pub fn codes(&self) -> &Tensor {
        match self {
            LatentSource::PerExample { z, .. } | LatentSource::Shared { z, .. } | LatentSource::PerClass { z, .. } => z,
        }
    }
}

/// Run a latent-space attack (or random draw) on training examples `rows`.
pub fn latent_attack(
    model: &dyn Model,
    source: LatentSource<'_>,
    rows: &[usize],
    labels: &[usize],
    config: &AttackConfig,
    random: bool,
) -> Result<Vec<AttackResult>> {
    let run = |decoder: &dyn Decoder, z: &Tensor, y: &[usize], idx: &[usize]| {
        let threat = Threat::Latent { decoder, z };
        if random {
            attacks::random_perturbation_baseline(model, threat, y, idx, config)
        } else {
            attacks::attack(model, threat, y, idx, config)
        }
    };
    let z = source.codes().select_rows(rows);
    match source {
        LatentSource::PerExample { decoder, .. } => {
            let sub = decoder.select(rows)?;
            run(sub.as_ref(), &z, labels, rows)
        }
        LatentSource::Shared { decoder, .. } => run(decoder, &z, labels, rows),
        LatentSource::PerClass { decoders, .. } => {
            let mut out: Vec<Option<AttackResult>> = vec![None; rows.len()];
            for (class, decoder) in decoders.iter().enumerate() {
                let pos: Vec<usize> = (0..rows.len()).filter(|&k| labels[k] == class).collect();
                if pos.is_empty() {
                    continue;
                }
                let y = vec![class; pos.len()];
                let idx: Vec<usize> = pos.iter().map(|&k| rows[k]).collect();
                for (k, r) in pos.iter().zip(run(*decoder, &z.select_rows(&pos), &y, &idx)?) {
                    out[*k] = Some(r);
                }
            }
            out.into_iter()
                .enumerate()
                .map(|(k, r)| r.ok_or_else(|| Error::InvalidArgument(format!("no decoder for class {}", labels[k]))))
                .collect()
        }
    }
}

/// Training data, optional latent codes and an optional test split for
/// per-epoch metrics.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub latents: Option<LatentSource<'a>>,
    pub test: Option<(&'a Tensor, &'a [usize])>,
}

impl<'a> TrainingData<'a> {
    pub fn new(images: &'a Tensor, labels: &'a [usize]) -> Self {
        Self { images, labels, latents: None, test: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over the batches as trained on.
    pub train_loss: f64,
    /// Error on the batches as trained on.
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub learning_rate: f64,
}

pub fn write_epoch_csv(metrics: &[EpochMetrics], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,train_loss,train_error,test_error,lr")?;
    for m in metrics {
        let test = m.test_error.map(|e| e.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", m.epoch, m.train_loss, m.train_error, test, m.learning_rate)?;
    }
    Ok(())
}

/// Rows perturbed in a batch of `b`: the last `ceil(b/2)`, or all of them.
pub fn perturbed_rows(kind: TrainingKind, b: usize) -> std::ops::Range<usize> {
    match kind {
        TrainingKind::Normal => b..b,
        TrainingKind::AdvFull => 0..b,
        _ => b / 2..b,
    }
}

/// Replace the rows `range` of `batch` according to `mode`.
fn perturb_batch(
    model: &Classifier,
    data: &TrainingData<'_>,
    mode: &TrainingMode,
    order: &[usize],
    range: std::ops::Range<usize>,
    batch: &mut Tensor,
    seed: u64,
) -> Result<()> {
    if range.is_empty() {
        return Ok(());
    }
    let rows: Vec<usize> = order[range.clone()].to_vec();
    let labels: Vec<usize> = rows.iter().map(|&i| data.labels[i]).collect();
    let x = data.images.select_rows(&rows);
    let cfg = AttackConfig { seed, ..mode.attack.clone() };
    let latents = || data.latents.ok_or_else(|| Error::InvalidArgument(format!("{} training needs latent codes", mode.kind)));
    let results = match mode.kind {
        TrainingKind::Normal => unreachable!("normal training perturbs nothing"),
        TrainingKind::AdvHalf | TrainingKind::AdvFull | TrainingKind::AdvWeak => attacks::pgd_attack(model, &x, &labels, &rows, &cfg)?,
        TrainingKind::AdvTransform => attacks::transformation_attack(model, &x, &labels, &rows, &cfg)?,
        TrainingKind::RandomImage => attacks::random_perturbation_baseline(model, Threat::Image { x: &x }, &labels, &rows, &cfg)?,
        TrainingKind::RandomTransform => attacks::random_perturbation_baseline(model, Threat::Transform { x: &x }, &labels, &rows, &cfg)?,
        TrainingKind::OnManifold => latent_attack(model, latents()?, &rows, &labels, &cfg, false)?,
        TrainingKind::RandomLatent => latent_attack(model, latents()?, &rows, &labels, &cfg, true)?,
        TrainingKind::Combined => {
            let m = (rows.len() as f64 * mode.manifold_fraction).round() as usize;
            let mcfg = AttackConfig { seed, ..mode.manifold_attack.clone() };
            let mut out = latent_attack(model, latents()?, &rows[..m], &labels[..m], &mcfg, false)?;
            out.extend(attacks::pgd_attack(model, &x.select_rows(&(m..rows.len()).collect::<Vec<_>>()), &labels[m..], &rows[m..], &cfg)?);
            out
        }
    };
    for (k, r) in range.zip(results) {
        batch.row_mut(k).copy_from_slice(&r.adversarial);
    }
    Ok(())
}

/// Consecutive batches of `order`; a one-row tail joins the batch before it so
/// batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out[out.len() - 1].len() == 1 {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch remains") = &order[start..];
    }
    out
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub classifier: Classifier,
    pub epochs: Vec<EpochMetrics>,
}

/// Train `classifier` under `mode`. Batches come from a per-epoch shuffle
/// derived from `seed`; inner attacks run against the current weights in
/// evaluation mode. The returned classifier is in evaluation mode.
pub fn train(
    mut classifier: Classifier,
    data: &TrainingData<'_>,
    mode: &TrainingMode,
    schedule: &TrainingSchedule,
    seed: u64,
) -> Result<TrainingOutcome> {
    schedule.validate()?;
    mode.validate()?;
    let n = data.images.rows();
    if n == 0 || data.labels.len() != n {
        bail!(Shape, "{} images but {} labels", n, data.labels.len());
    }
    if data.images.shape()[1..] != *classifier.input_shape() {
        bail!(Shape, "classifier expects inputs {:?}, data has {:?}", classifier.input_shape(), &data.images.shape()[1..]);
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= classifier.num_classes()) {
        bail!(InvalidArgument, "label {y} out of range for {} classes", classifier.num_classes());
    }
    if mode.kind.needs_latents() {
        match data.latents {
            None => bail!(InvalidArgument, "{} training needs a decoder and latent codes", mode.kind),
            Some(l) if l.codes().rows() != n => bail!(Shape, "{} latent codes for {n} images", l.codes().rows()),
            _ => {}
        }
    }
    let adam_cfg = AdamConfig::new(schedule.learning_rate)
        .with_weight_decay(schedule.weight_decay)
        .with_lr_decay(schedule.decay);
    let mut adam = AdamState::for_tensors(adam_cfg, classifier.network.params().iter().map(|p| &p.value));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(schedule.epochs);
    let mut step = 0u64;
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng::stream(seed, "train-shuffle", epoch as u64));
        let learning_rate = adam.learning_rate();
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for chunk in batches(&order, schedule.batch_size) {
            let mut batch = data.images.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let range = perturbed_rows(mode.kind, chunk.len());
            classifier.network.set_mode(Mode::Eval);
            perturb_batch(&classifier, data, mode, chunk, range, &mut batch, rng::derive_seed(seed, "inner-attack", step))?;
            classifier.network.set_mode(Mode::Train);
            step += 1;

            let mut tape = Tape::new();
            let params = classifier.network.bind(&mut tape, true);
            let x = tape.constant(batch);
            let fwd = classifier.forward(&mut tape, &params, x)?;
            let loss = tape.cross_entropy(fwd.output, &labels, Reduction::Mean)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("training loss became non-finite in epoch {epoch}")));
            }
            loss_sum += lv * chunk.len() as f64;
            let logits = tape.value(fwd.output);
            wrong += (0..chunk.len()).filter(|&r| argmax(logits.row(r)) != labels[r]).count();
            let grads = tape.backward(loss)?;
            step_network(&mut classifier.network, &mut adam, &grads, &params)?;
            classifier.network.update_running_stats(&fwd.batch_stats);
        }
        adam.end_epoch();
        classifier.network.set_mode(Mode::Eval);
        let test_error = match data.test {
            Some((x, y)) => Some(evaluate(&classifier, x, y)?),
            None => None,
        };
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_error: wrong as f64 / n as f64,
            test_error,
            learning_rate,
        });
    }
    classifier.network.set_mode(Mode::Eval);
    Ok(TrainingOutcome { classifier, epochs })
}

/// Fraction of misclassified examples.
pub fn evaluate(model: &dyn Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if images.rows() == 0 {
        bail!(InvalidArgument, "cannot evaluate on an empty dataset");
    }
    if labels.len() != images.rows() {
        bail!(Shape, "{} images but {} labels", images.rows(), labels.len());
    }
    let pred = model.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p != y).count() as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::nn::{ArchitectureKind, Layer};

    #[test]
    fn single_row_tail_joins_the_previous_batch() {
        let order: Vec<usize> = (0..15).collect();
        let sizes: Vec<usize> = batches(&order, 7).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![7, 8]);
        let sizes: Vec<usize> = batches(&order[..14], 7).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![7, 7]);
        assert_eq!(batches(&order[..1], 7).len(), 1);
    }

    struct Constant(usize, Vec<usize>);

    impl Model for Constant {
        fn num_classes(&self) -> usize {
            10
        }

        fn input_shape(&self) -> &[usize] {
            &self.1
        }

        fn logits(&self, tape: &mut Tape, input: Var) -> Result<Var> {
            let b = tape.shape(input)[0];
            let mut v = vec![0.0; b * 10];
            for r in 0..b {
                v[r * 10 + self.0] = 1.0;
            }
            Ok(tape.constant(Tensor::new(vec![b, 10], v)?))
        }
    }

    fn toy_data(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut v = Vec::with_capacity(n * 4);
        for &y in &labels {
            for j in 0..4 {
                let centre = if j == y { 0.8 } else { 0.2 };
                v.push((centre + r.random_range(-0.15..0.15f64)).clamp(0.0, 1.0));
            }
        }
        (Tensor::new(vec![n, 4], v).unwrap(), labels)
    }

    fn small(seed: u64) -> Classifier {
        let layers = vec![
            Layer::Linear { inputs: 4, outputs: 16 },
            Layer::Relu,
            Layer::BatchNorm { features: 16 },
            Layer::Linear { inputs: 16, outputs: 3 },
        ];
        Classifier::build(ArchitectureKind::Custom(layers), &[4], 3, seed).unwrap()
    }

    fn sched() -> TrainingSchedule {
        TrainingSchedule { epochs: 5, batch_size: 25, ..TrainingSchedule::default() }
    }

    #[test]
    fn constant_model_error_on_balanced_data() {
        let x = Tensor::zeros(&[100, 1]);
        let y: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(evaluate(&Constant(3, vec![1]), &x, &y).unwrap(), 0.9);
        assert!(evaluate(&Constant(3, vec![1]), &Tensor::zeros(&[0, 1]), &[]).is_err());
    }

    #[test]
    fn normal_training_learns_and_is_deterministic() {
        let (x, y) = toy_data(300, 1);
        let data = TrainingData::new(&x, &y);
        let a = train(small(4), &data, &TrainingMode::new(TrainingKind::Normal), &sched(), 7).unwrap();
        let b = train(small(4), &data, &TrainingMode::new(TrainingKind::Normal), &sched(), 7).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.epochs, b.epochs);
        assert!(evaluate(&a.classifier, &x, &y).unwrap() < 0.05);
        assert!(evaluate(&a.classifier, &x, &y).unwrap() <= evaluate(&small(4), &x, &y).unwrap());
        let lrs: Vec<f64> = a.epochs.iter().map(|e| e.learning_rate).collect();
        assert!((lrs[1] - 0.01 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_adversarial_modes_match_normal_training() {
        let (x, y) = toy_data(120, 2);
        let data = TrainingData::new(&x, &y);
        let s = TrainingSchedule { epochs: 2, ..sched() };
        let normal = train(small(1), &data, &TrainingMode::new(TrainingKind::Normal), &s, 3).unwrap();
        for kind in [TrainingKind::AdvHalf, TrainingKind::AdvFull, TrainingKind::AdvWeak, TrainingKind::RandomImage] {
            let mut mode = TrainingMode::new(kind).with_epsilon(0.0);
            mode.attack.iterations = 3;
            let adv = train(small(1), &data, &mode, &s, 3).unwrap();
            assert_eq!(adv.classifier, normal.classifier, "{kind}");
        }
    }

    #[test]
    fn half_split_counts() {
        assert_eq!(perturbed_rows(TrainingKind::AdvHalf, 100).len(), 50);
        assert_eq!(perturbed_rows(TrainingKind::AdvHalf, 7).len(), 4);
        assert_eq!(perturbed_rows(TrainingKind::AdvFull, 7).len(), 7);
        assert_eq!(perturbed_rows(TrainingKind::Normal, 7).len(), 0);
    }

    #[test]
    fn latent_modes_need_a_decoder() {
        let (x, y) = toy_data(30, 2);
        let data = TrainingData::new(&x, &y);
        for kind in [TrainingKind::OnManifold, TrainingKind::RandomLatent, TrainingKind::Combined] {
            assert!(matches!(train(small(1), &data, &TrainingMode::new(kind), &sched(), 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for k in TrainingKind::ALL {
            assert_eq!(k.name().parse::<TrainingKind>().unwrap(), k);
        }
    }
}
