//! Success rates of an attack suite against a frozen model.

use serde::{Deserialize, Serialize};

use super::{latent_attack, LatentSource};
use crate::attacks::{self, AttackConfig, AttackRecord, AttackResult, CwConfig, Norm, Threat};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Image,
    Latent,
    Transform,
    Cw,
    RandomImage,
    RandomLatent,
    RandomTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub space: SpaceKind,
    #[serde(default)]
    pub config: AttackConfig,
    #[serde(default)]
    pub cw: CwConfig,
    /// Number of leading test inputs attacked.
    pub samples: usize,
}

impl AttackSpec {
    pub fn new(name: &str, space: SpaceKind, config: AttackConfig, samples: usize) -> Self {
        Self { name: name.to_string(), space, config, cw: CwConfig::default(), samples }
    }

    pub fn norm_label(&self) -> String {
        let norm = match self.config.norm {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        };
        match self.space {
            SpaceKind::Image | SpaceKind::RandomImage => norm.to_string(),
            SpaceKind::Latent | SpaceKind::RandomLatent => format!("latent_{norm}"),
            SpaceKind::Transform | SpaceKind::RandomTransform => format!("transform_{norm}"),
            SpaceKind::Cw => "l2".to_string(),
        }
    }

    pub fn needs_latents(&self) -> bool {
        matches!(self.space, SpaceKind::Latent | SpaceKind::RandomLatent)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackMetrics {
    pub name: String,
    /// Inputs considered (the leading `samples` test inputs).
    pub attempted: usize,
    /// Of those, the ones the model classifies correctly; only these are attacked.
    pub eligible: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    /// Mean perturbation norm over successful attacks.
    pub mean_norm: Option<f64>,
    pub records: Vec<AttackRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessProfile {
    pub test_error: f64,
    pub attacks: Vec<AttackMetrics>,
}

/// Attack the correctly classified inputs among the first `samples` test
/// inputs with every attack of `suite`. Indices in `latents` refer to rows
/// of `images`.
pub fn robustness_profile(
    model: &dyn Model,
    images: &Tensor,
    labels: &[usize],
    latents: Option<LatentSource<'_>>,
    suite: &[AttackSpec],
) -> Result<RobustnessProfile> {
    let test_error = super::evaluate(model, images, labels)?;
    let predicted = model.predict(images)?;
    let mut out = Vec::with_capacity(suite.len());
    for spec in suite {
        let attempted = spec.samples.min(images.rows());
        let rows: Vec<usize> = (0..attempted).filter(|&i| predicted[i] == labels[i]).collect();
        let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let x = images.select_rows(&rows);
        let cfg = &spec.config;
        let need = || latents.ok_or_else(|| Error::InvalidArgument(format!("attack {:?} needs latent codes", spec.name)));
        let results: Vec<AttackResult> = if rows.is_empty() {
            Vec::new()
        } else {
            match spec.space {
                SpaceKind::Image => attacks::pgd_attack(model, &x, &y, &rows, cfg)?,
                SpaceKind::Transform => attacks::transformation_attack(model, &x, &y, &rows, cfg)?,
                SpaceKind::Cw => attacks::cw_attack(model, &x, &y, &spec.cw)?,
                SpaceKind::RandomImage => attacks::random_perturbation_baseline(model, Threat::Image { x: &x }, &y, &rows, cfg)?,
                SpaceKind::RandomTransform => attacks::random_perturbation_baseline(model, Threat::Transform { x: &x }, &y, &rows, cfg)?,
                SpaceKind::Latent => latent_attack(model, need()?, &rows, &y, cfg, false)?,
                SpaceKind::RandomLatent => latent_attack(model, need()?, &rows, &y, cfg, true)?,
            }
        };
        let successes = results.iter().filter(|r| r.success).count();
        let mean_norm = (successes > 0)
            .then(|| results.iter().filter(|r| r.success).map(|r| r.perturbation_norm).sum::<f64>() / successes as f64);
        let success = results.iter().map(|r| r.success).collect::<Vec<_>>();
        let label = spec.norm_label();
        let records = rows
            .iter()
            .zip(results)
            .map(|(&index, result)| AttackRecord {
                index,
                label: labels[index],
                predicted_before: predicted[index],
                norm_used: label.clone(),
                result,
            })
            .collect();
        out.push(AttackMetrics {
            name: spec.name.clone(),
            attempted,
            eligible: rows.len(),
            successes,
            success_rate: attacks::success_rate(&success, &vec![true; success.len()]),
            mean_norm,
            records,
        });
    }
    Ok(RobustnessProfile { test_error, attacks: out })
}
