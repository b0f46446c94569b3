//! Carlini-Wagner L2 attack with the tanh box reparameterization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predictions, AttackResult};
use crate::autodiff::Tape;
use crate::error::{bail, Result};
use crate::nn::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{norm_l2, Tensor};

/// Keeps `atanh(2x - 1)` finite at saturated pixels.
pub const INSET: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwConfig {
    pub kappa: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self { kappa: 1.5, lambda: 1.0, iterations: 120, learning_rate: 0.005 }
    }
}

/// `max(-kappa, l_y - max_{j != y} l_j)`.
pub fn cw_objective(logits: &[f64], y: usize, kappa: f64) -> f64 {
    let other = logits.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    (logits[y] - other).max(-kappa)
}

/// Inverse of `x = (tanh(w) + 1) / 2` after insetting `x` into the open box.
pub fn to_tanh_space(x: f64) -> f64 {
    (2.0 * x.clamp(INSET, 1.0 - INSET) - 1.0).atanh()
}

pub fn from_tanh_space(w: f64) -> f64 {
    0.5 * (w.tanh() + 1.0)
}

const CHUNK: usize = 100;

/// Minimize `F(x', y) + lambda * ||x' - x||_2` over `w`, with `x' = (tanh(w)+1)/2`.
/// Success is judged on the final iterate.
pub fn cw_attack(model: &dyn Model, x: &Tensor, labels: &[usize], config: &CwConfig) -> Result<Vec<AttackResult>> {
    if labels.len() != x.rows() {
        bail!(Shape, "{} inputs but {} labels", x.rows(), labels.len());
    }
    if !(config.learning_rate > 0.0) || !(config.kappa >= 0.0) || !(config.lambda >= 0.0) {
        bail!(InvalidArgument, "CW needs a positive learning rate and non-negative kappa and lambda");
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    let parts: Vec<Vec<AttackResult>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let xs = x.select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            run(model, &xs, &ys, config)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn run(model: &dyn Model, x: &Tensor, labels: &[usize], config: &CwConfig) -> Result<Vec<AttackResult>> {
    let b = x.rows();
    let d = x.row_len();
    let mut w = x.map(to_tanh_space);
    let mut adam = AdamState::new(AdamConfig::new(config.learning_rate), &[w.len()]);
    let step = |w: &Tensor, grad: bool| -> Result<(Tensor, Vec<f64>, Vec<usize>, Option<Tensor>)> {
        let mut tape = Tape::new();
        let wv = if grad { tape.param(w.clone()) } else { tape.constant(w.clone()) };
        let t = tape.tanh(wv);
        let t = tape.add_scalar(t, 1.0);
        let img = tape.scale(t, 0.5);
        let logits = model.logits(&mut tape, img)?;
        let f = tape.margin_each(logits, labels, config.kappa)?;
        let x0 = tape.constant(x.clone());
        let delta = tape.sub(img, x0)?;
        let flat = tape.reshape(delta, &[b, d])?;
        let n = tape.l2_norm_rows(flat);
        let n = tape.scale(n, config.lambda);
        let obj = tape.add(f, n)?;
        let g = if grad {
            let total = tape.sum(obj);
            Some(tape.backward(total)?.get_or_zeros(wv))
        } else {
            None
        };
        Ok((tape.value(img).clone(), tape.value(obj).data().to_vec(), predictions(tape.value(logits)), g))
    };
    for _ in 0..config.iterations {
        let (_, _, _, g) = step(&w, true)?;
        let g = g.expect("gradient requested");
        adam.step(&mut [w.data_mut()], &[g.data()])?;
    }
    let (img, obj, pred, _) = step(&w, false)?;
    Ok((0..b)
        .map(|r| {
            let adversarial = img.row(r).to_vec();
            let perturbation: Vec<f64> = adversarial.iter().zip(x.row(r)).map(|(a, b)| a - b).collect();
            AttackResult {
                success: pred[r] != labels[r],
                perturbation_norm: norm_l2(&perturbation),
                perturbation,
                adversarial,
                iterations_used: config.iterations,
                restart_index: 0,
                final_loss: obj[r],
                predicted: pred[r],
            }
        })
        .collect())
}
