//! Adversarial example generation: projected-Adam attacks in image, latent
//! and transformation space, Carlini-Wagner L2, transfer attacks, random
//! baselines and the success-rate metric.

mod cw;
mod engine;

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::manifold::Decoder;
use crate::nn::Model;
use crate::rng::Rng;
use crate::tensor::{argmax, norm_l2, norm_linf, Tensor};

pub use cw::{cw_attack, cw_objective, from_tanh_space, to_tanh_space, CwConfig};
pub use engine::identity_pose_offset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn of(&self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => norm_linf(v),
            Norm::L2 => norm_l2(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Ball radius (epsilon in image space, eta in latent or pose space).
    pub epsilon: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub restarts: usize,
    /// Stop a restart as soon as the predicted label changes.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { norm: Norm::Linf, epsilon: 0.3, iterations: 40, learning_rate: 0.005, restarts: 5, early_stop: true, seed: 0 }
    }
}

impl AttackConfig {
    pub fn linf(epsilon: f64) -> Self {
        Self { norm: Norm::Linf, epsilon, ..Self::default() }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self { norm: Norm::L2, epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            bail!(InvalidArgument, "attack radius must be a non-negative number, got {}", self.epsilon);
        }
        if self.restarts == 0 {
            bail!(InvalidArgument, "attacks need at least one restart");
        }
        if !(self.learning_rate > 0.0) {
            bail!(InvalidArgument, "attack learning rate must be positive");
        }
        Ok(())
    }
}

/// Outcome of attacking one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    /// The adversarial image, flattened.
    pub adversarial: Vec<f64>,
    /// `x_adv - x` for image attacks, the latent offset for on-manifold
    /// attacks and the pose offset for transformation attacks.
    pub perturbation: Vec<f64>,
    /// Gradient steps taken in the reported restart.
    pub iterations_used: usize,
    pub restart_index: usize,
    /// Attack objective at the reported iterate.
    pub final_loss: f64,
    /// Norm of `perturbation` in the attack's norm.
    pub perturbation_norm: f64,
    /// Prediction on the adversarial image.
    pub predicted: usize,
}

/// Project onto the ball of radius `epsilon`: clamping for L-infinity,
/// radial scaling by `min(1, epsilon / ||d||)` for L2.
pub fn project_ball(delta: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => {
            for v in delta.iter_mut() {
                *v = v.clamp(-epsilon, epsilon);
            }
        }
        Norm::L2 => {
            let n = norm_l2(delta);
            if n > epsilon {
                let k = epsilon / n;
                for v in delta.iter_mut() {
                    *v *= k;
                }
            }
        }
    }
}

/// `u * epsilon * d / ||d||` for a raw direction `d`: Gaussian for L2,
/// per-coordinate uniform on `[-1, 1]` for L-infinity.
pub fn scale_direction(norm: Norm, epsilon: f64, u: f64, direction: &[f64]) -> Vec<f64> {
    let n = norm.of(direction);
    if n == 0.0 || u == 0.0 || epsilon == 0.0 {
        return vec![0.0; direction.len()];
    }
    let k = u * epsilon / n;
    let mut out: Vec<f64> = direction.iter().map(|v| v * k).collect();
    // Rounding can leave the result a hair outside the ball.
    project_ball(&mut out, norm, epsilon);
    out
}

/// Random starting perturbation, uniform over distance and direction.
pub fn init_perturbation(rng: &mut Rng, norm: Norm, epsilon: f64, len: usize) -> Vec<f64> {
    let direction: Vec<f64> = match norm {
        Norm::L2 => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
        Norm::Linf => (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    };
    let u: f64 = rng.random_range(0.0..1.0);
    scale_direction(norm, epsilon, u, &direction)
}

/// What an attack perturbs.
#[derive(Clone, Copy)]
pub enum Threat<'a> {
    /// Additive perturbation of images `[B, C, H, W]`.
    Image { x: &'a Tensor },
    /// Offset of latent codes `z: [B, d]` decoded by `decoder`, whose row `i`
    /// belongs to example `i`.
    Latent { decoder: &'a dyn Decoder, z: &'a Tensor },
    /// Offset of the identity pose applied to images `[B, C, H, W]`.
    Transform { x: &'a Tensor },
}

impl Threat<'_> {
    pub fn rows(&self) -> usize {
        match self {
            Threat::Image { x } | Threat::Transform { x } => x.rows(),
            Threat::Latent { z, .. } => z.rows(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Threat::Image { .. } => "image",
            Threat::Latent { .. } => "latent",
            Threat::Transform { .. } => "transform",
        }
    }
}

/// Rows per engine invocation; chunks run on the rayon pool.
const CHUNK: usize = 100;

/// Projected-Adam ascent on the cross-entropy of `model`, with per-example
/// random streams derived from `(config.seed, indices[i])`.
pub fn attack(model: &dyn Model, threat: Threat<'_>, labels: &[usize], indices: &[usize], config: &AttackConfig) -> Result<Vec<AttackResult>> {
    config.validate()?;
    let b = threat.rows();
    if labels.len() != b || indices.len() != b {
        bail!(Shape, "{b} inputs but {} labels and {} indices", labels.len(), indices.len());
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.num_classes()) {
        bail!(InvalidArgument, "label {y} out of range for {} classes", model.num_classes());
    }
    let rows: Vec<usize> = (0..b).collect();
    let parts: Vec<Vec<AttackResult>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let space = engine::space_for(threat, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let idx: Vec<usize> = chunk.iter().map(|&i| indices[i]).collect();
            engine::run(model, space.as_ref(), &y, &idx, config, threat.kind())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Regular attack in image space.
pub fn pgd_attack(model: &dyn Model, x: &Tensor, labels: &[usize], indices: &[usize], config: &AttackConfig) -> Result<Vec<AttackResult>> {
    attack(model, Threat::Image { x }, labels, indices, config)
}

/// Attack through a decoder: the adversarial image is `dec(z + zeta)`.
pub fn on_manifold_attack(
    model: &dyn Model,
    decoder: &dyn Decoder,
    z: &Tensor,
    labels: &[usize],
    indices: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if z.ndim() != 2 || z.row_len() != decoder.latent_dim() {
        bail!(Shape, "latent codes must be [B, {}], got {:?}", decoder.latent_dim(), z.shape());
    }
    attack(model, Threat::Latent { decoder, z }, labels, indices, config)
}

/// Attack over the six pose parameters of an affine warp of `x`.
pub fn transformation_attack(model: &dyn Model, x: &Tensor, labels: &[usize], indices: &[usize], config: &AttackConfig) -> Result<Vec<AttackResult>> {
    attack(model, Threat::Transform { x }, labels, indices, config)
}

/// One uniform draw per restart in the threat's ball, without optimization.
pub fn random_perturbation_baseline(
    model: &dyn Model,
    threat: Threat<'_>,
    labels: &[usize],
    indices: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let cfg = AttackConfig { iterations: 0, early_stop: true, ..config.clone() };
    attack(model, threat, labels, indices, &cfg)
}

/// Fraction of successes among eligible inputs; `None` when none is eligible.
pub fn success_rate(success: &[bool], eligible: &[bool]) -> Option<f64> {
    let n = eligible.iter().filter(|&&e| e).count();
    if n == 0 {
        return None;
    }
    let s = success.iter().zip(eligible).filter(|(&s, &e)| s && e).count();
    Some(s as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Inputs both models classify correctly.
    pub eligible: usize,
    pub successes: usize,
    pub rate: f64,
}

/// Craft regular attacks against `source` and count how many fool `target`,
/// among inputs both classify correctly.
pub fn transfer_attack(
    source: &dyn Model,
    target: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    indices: &[usize],
    config: &AttackConfig,
) -> Result<TransferStats> {
    let ps = source.predict(x)?;
    let pt = target.predict(x)?;
    let joint: Vec<usize> = (0..labels.len()).filter(|&i| ps[i] == labels[i] && pt[i] == labels[i]).collect();
    if joint.is_empty() {
        bail!(InvalidArgument, "no input is classified correctly by both models");
    }
    let xs = x.select_rows(&joint);
    let ys: Vec<usize> = joint.iter().map(|&i| labels[i]).collect();
    let ids: Vec<usize> = joint.iter().map(|&i| indices[i]).collect();
    let res = pgd_attack(source, &xs, &ys, &ids, config)?;
    let adv = Tensor::stack_rows(&x.shape()[1..], res.iter().map(|r| r.adversarial.as_slice()))?;
    let pred = target.predict(&adv)?;
    let successes = pred.iter().zip(&ys).filter(|(p, y)| p != y).count();
    Ok(TransferStats { eligible: joint.len(), successes, rate: successes as f64 / joint.len() as f64 })
}

/// Predicted labels from logits rows.
pub(crate) fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

/// One CSV row of an attack run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub index: usize,
    pub label: usize,
    pub predicted_before: usize,
    pub norm_used: String,
    pub result: AttackResult,
}

pub fn write_csv(records: &[AttackRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "index,label,predicted_before,predicted_after,success,norm_used,perturbation_norm,iterations_used,restart_index,final_loss")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.label,
            r.predicted_before,
            r.result.predicted,
            u8::from(r.result.success),
            r.norm_used,
            r.result.perturbation_norm,
            r.result.iterations_used,
            r.result.restart_index,
            r.result.final_loss
        )?;
    }
    Ok(())
}
