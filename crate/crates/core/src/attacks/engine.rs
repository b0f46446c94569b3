//! Batched projected-Adam ascent shared by all gradient attacks.

use super::{init_perturbation, predictions, project_ball, AttackConfig, AttackResult, Threat};
use crate::autodiff::{Tape, Var, POSE_LEN};
use crate::error::Result;
use crate::fonts::decode_on_tape;
use crate::manifold::Decoder;
use crate::nn::Model;
use crate::rng;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A batch of inputs and the map from perturbations `[B, m]` to images.
pub(super) trait Space: Sync {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn select(&self, rows: &[usize]) -> Result<Box<dyn Space + '_>>;
    fn image(&self, tape: &mut Tape, p: Var) -> Result<Var>;
    /// Enforce the input box for row `row` after the ball projection.
    fn constrain(&self, _row: usize, _p: &mut [f64]) {}
}

struct ImageSpace {
    x: Tensor,
}

impl Space for ImageSpace {
    fn rows(&self) -> usize {
        self.x.rows()
    }

    fn dim(&self) -> usize {
        self.x.row_len()
    }

    fn select(&self, rows: &[usize]) -> Result<Box<dyn Space + '_>> {
        Ok(Box::new(ImageSpace { x: self.x.select_rows(rows) }))
    }

    fn image(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        let x = tape.constant(self.x.clone());
        let d = tape.reshape(p, self.x.shape())?;
        let s = tape.add(x, d)?;
        Ok(tape.clamp(s, 0.0, 1.0))
    }

    fn constrain(&self, row: usize, p: &mut [f64]) {
        for (v, x) in p.iter_mut().zip(self.x.row(row)) {
            *v = (x + *v).clamp(0.0, 1.0) - x;
        }
    }
}

struct LatentSpace {
    decoder: Box<dyn Decoder>,
    z: Tensor,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Space for LatentSpace {
    fn rows(&self) -> usize {
        self.z.rows()
    }

    fn dim(&self) -> usize {
        self.z.row_len()
    }

    fn select(&self, rows: &[usize]) -> Result<Box<dyn Space + '_>> {
        Ok(Box::new(LatentSpace {
            decoder: self.decoder.select(rows)?,
            z: self.z.select_rows(rows),
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }))
    }

    fn image(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        let z = tape.constant(self.z.clone());
        let s = tape.add(z, p)?;
        self.decoder.decode(tape, s)
    }

    fn constrain(&self, row: usize, p: &mut [f64]) {
        for (j, (v, z)) in p.iter_mut().zip(self.z.row(row)).enumerate() {
            *v = (z + *v).clamp(self.lo[j], self.hi[j]) - z;
        }
    }
}

/// Pose offset whose addition to `[t1, t2, l1, l2, s, r]` is the identity
/// when the offset is zero.
pub fn identity_pose_offset(t: &[f64]) -> [f64; POSE_LEN] {
    [t[0], t[1], t[2], t[3], 1.0 + t[4], t[5]]
}

struct TransformSpace {
    x: Tensor,
}

impl Space for TransformSpace {
    fn rows(&self) -> usize {
        self.x.rows()
    }

    fn dim(&self) -> usize {
        POSE_LEN
    }

    fn select(&self, rows: &[usize]) -> Result<Box<dyn Space + '_>> {
        Ok(Box::new(TransformSpace { x: self.x.select_rows(rows) }))
    }

    fn image(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        let b = self.x.rows();
        let mut base = vec![0.0; b * POSE_LEN];
        for r in 0..b {
            base[r * POSE_LEN + 4] = 1.0;
        }
        let identity = tape.constant(Tensor::new(vec![b, POSE_LEN], base)?);
        let pose = tape.add(identity, p)?;
        let x = tape.constant(self.x.clone());
        decode_on_tape(tape, x, pose)
    }
}

pub(super) fn space_for(threat: Threat<'_>, rows: &[usize]) -> Result<Box<dyn Space>> {
    Ok(match threat {
        Threat::Image { x } => Box::new(ImageSpace { x: x.select_rows(rows) }),
        Threat::Transform { x } => Box::new(TransformSpace { x: x.select_rows(rows) }),
        Threat::Latent { decoder, z } => {
            let (lo, hi) = decoder.bounds();
            Box::new(LatentSpace { decoder: decoder.select(rows)?, z: z.select_rows(rows), lo, hi })
        }
    })
}

#[derive(Clone)]
struct Candidate {
    p: Vec<f64>,
    image: Vec<f64>,
    loss: f64,
    predicted: usize,
    iteration: usize,
}

struct Evaluation {
    images: Tensor,
    losses: Vec<f64>,
    predicted: Vec<usize>,
    grads: Option<Tensor>,
}

fn evaluate(model: &dyn Model, space: &dyn Space, p: Tensor, labels: &[usize], want_grad: bool) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let pv = if want_grad { tape.param(p) } else { tape.constant(p) };
    let img = space.image(&mut tape, pv)?;
    let logits = model.logits(&mut tape, img)?;
    let each = tape.cross_entropy_each(logits, labels)?;
    let grads = if want_grad {
        let total = tape.sum(each);
        Some(tape.backward(total)?.get_or_zeros(pv))
    } else {
        None
    };
    Ok(Evaluation {
        images: tape.value(img).clone(),
        losses: tape.value(each).data().to_vec(),
        predicted: predictions(tape.value(logits)),
        grads,
    })
}

/// Run all restarts for one chunk. `indices` are global example indices
/// used to derive per-example random streams.
pub(super) fn run(
    model: &dyn Model,
    space: &dyn Space,
    labels: &[usize],
    indices: &[usize],
    config: &AttackConfig,
    tag: &str,
) -> Result<Vec<AttackResult>> {
    let b = space.rows();
    let m = space.dim();
    let mut streams: Vec<rng::Rng> = indices
        .iter()
        .map(|&i| rng::stream(config.seed, &format!("attack-{tag}"), i as u64))
        .collect();
    let mut succeeded: Vec<Option<(Candidate, usize, usize)>> = vec![None; b];
    let mut fallback: Vec<Option<(Candidate, usize, usize)>> = vec![None; b];
    for restart in 0..config.restarts {
        let pending: Vec<usize> = (0..b).filter(|&i| succeeded[i].is_none()).collect();
        if pending.is_empty() {
            break;
        }
        let sub = space.select(&pending)?;
        let n = pending.len();
        let ys: Vec<usize> = pending.iter().map(|&i| labels[i]).collect();
        let mut p: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (k, &i) in pending.iter().enumerate() {
            let mut d = init_perturbation(&mut streams[i], config.norm, config.epsilon, m);
            sub.constrain(k, &mut d);
            p.push(d);
        }
        let mut mom = vec![vec![0.0; m]; n];
        let mut vel = vec![vec![0.0; m]; n];
        let mut best_any: Vec<Option<Candidate>> = vec![None; n];
        let mut best_hit: Vec<Option<Candidate>> = vec![None; n];
        let mut active: Vec<usize> = (0..n).collect();
        for it in 0..=config.iterations {
            let cur = if active.len() == n { None } else { Some(sub.select(&active)?) };
            let sp: &dyn Space = cur.as_deref().unwrap_or(sub.as_ref());
            let y: Vec<usize> = active.iter().map(|&k| ys[k]).collect();
            let data: Vec<f64> = active.iter().flat_map(|&k| p[k].iter().copied()).collect();
            let want_grad = it < config.iterations;
            let ev = evaluate(model, sp, Tensor::from_parts(vec![active.len(), m], data), &y, want_grad)?;
            let mut still = Vec::with_capacity(active.len());
            for (a, &k) in active.iter().enumerate() {
                let cand = || Candidate {
                    p: p[k].clone(),
                    image: ev.images.row(a).to_vec(),
                    loss: ev.losses[a],
                    predicted: ev.predicted[a],
                    iteration: it,
                };
                let hit = ev.predicted[a] != ys[k];
                if best_any[k].as_ref().is_none_or(|c| ev.losses[a] > c.loss) {
                    best_any[k] = Some(cand());
                }
                if hit && best_hit[k].as_ref().is_none_or(|c| ev.losses[a] > c.loss) {
                    best_hit[k] = Some(cand());
                }
                if !(hit && config.early_stop) {
                    still.push((a, k));
                }
            }
            if !want_grad || still.is_empty() {
                break;
            }
            let g = ev.grads.expect("gradients requested");
            let t = (it + 1) as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            for &(a, k) in &still {
                let gr = g.row(a);
                for j in 0..m {
                    mom[k][j] = BETA1 * mom[k][j] + (1.0 - BETA1) * gr[j];
                    vel[k][j] = BETA2 * vel[k][j] + (1.0 - BETA2) * gr[j] * gr[j];
                    p[k][j] += config.learning_rate * (mom[k][j] / c1) / ((vel[k][j] / c2).sqrt() + ADAM_EPS);
                }
                project_ball(&mut p[k], config.norm, config.epsilon);
                sub.constrain(k, &mut p[k]);
            }
            active = still.into_iter().map(|(_, k)| k).collect();
        }
        for (k, &i) in pending.iter().enumerate() {
            match best_hit[k].take() {
                Some(c) => {
                    let used = if config.early_stop { c.iteration } else { config.iterations };
                    succeeded[i] = Some((c, restart, used));
                }
                None => {
                    let c = best_any[k].take().expect("every row is evaluated");
                    if fallback[i].as_ref().is_none_or(|(f, _, _)| c.loss > f.loss) {
                        fallback[i] = Some((c, restart, config.iterations));
                    }
                }
            }
        }
    }
    Ok((0..b)
        .map(|i| {
            let success = succeeded[i].is_some();
            let (c, restart_index, iterations_used) = succeeded[i].take().or(fallback[i].take()).expect("at least one restart");
            let perturbation = c.p;
            AttackResult {
                success,
                perturbation_norm: config.norm.of(&perturbation),
                perturbation,
                adversarial: c.image,
                iterations_used,
                restart_index,
                final_loss: c.loss,
                predicted: c.predicted,
            }
        })
        .collect())
}
