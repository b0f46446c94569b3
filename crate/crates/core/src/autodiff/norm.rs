//! Batch normalization over the channel axis of `[B, C]` or `[B, C, H, W]` inputs.

use super::{value, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Per-channel statistics observed on a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// (batch, channels, spatial) layout of a normalizable input.
fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [b, c] => Some((*b, *c, 1)),
        [b, c, h, w] => Some((*b, *c, h * w)),
        _ => None,
    }
}

impl Tape {
    /// Normalize with the batch's own statistics (training mode).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let Some((batch, ch, sp)) = layout(self.shape(x)) else {
            bail!(Shape, "batch_norm: unsupported input shape {:?}", self.shape(x));
        };
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            bail!(Shape, "batch_norm: affine parameters must have shape [{ch}]");
        }
        let m = batch * sp;
        if m < 2 {
            bail!(Shape, "batch_norm: need at least two values per channel in training mode");
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            let mut s = 0.0;
            for b in 0..batch {
                s += xv[(b * ch + c) * sp..(b * ch + c + 1) * sp].iter().sum::<f64>();
            }
            mean[c] = s / m as f64;
            let mut q = 0.0;
            for b in 0..batch {
                for &v in &xv[(b * ch + c) * sp..(b * ch + c + 1) * sp] {
                    q += (v - mean[c]).powi(2);
                }
            }
            var[c] = q / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let shape = self.shape(x).to_vec();
        let y = self.push(Tensor::from_parts(shape, out), &[x, gamma, beta], move |g, nodes, store| {
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for b in 0..batch {
                for c in 0..ch {
                    for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            if store.wants(gamma) {
                store.add(gamma, &sum_gx);
            }
            if store.wants(beta) {
                store.add(beta, &sum_g);
            }
            if store.wants(x) {
                let gv = value(nodes, gamma).data();
                let mf = m as f64;
                let s = store.slot(x);
                for b in 0..batch {
                    for c in 0..ch {
                        let k = gv[c] * inv_std[c] / mf;
                        for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                            s[i] += k * (mf * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                }
            }
        });
        Ok((y, stats))
    }

    /// Normalize with fixed running statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let Some((batch, ch, sp)) = layout(self.shape(x)) else {
            bail!(Shape, "batch_norm: unsupported input shape {:?}", self.shape(x));
        };
        if self.shape(gamma) != [ch]
            || self.shape(beta) != [ch]
            || running_mean.len() != ch
            || running_var.len() != ch
        {
            bail!(Shape, "batch_norm: statistics must have {ch} channels");
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                    out[i] = gv[c] * ((xv[i] - mean[c]) * inv_std[c]) + bv[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[x, gamma, beta], move |g, nodes, store| {
            let xv = value(nodes, x).data();
            if store.wants(gamma) || store.wants(beta) {
                let mut dg = vec![0.0; ch];
                let mut db = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                            dg[c] += g[i] * (xv[i] - mean[c]) * inv_std[c];
                            db[c] += g[i];
                        }
                    }
                }
                store.add(gamma, &dg);
                store.add(beta, &db);
            }
            if store.wants(x) {
                let gv = value(nodes, gamma).data();
                let s = store.slot(x);
                for b in 0..batch {
                    for c in 0..ch {
                        let k = gv[c] * inv_std[c];
                        for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                            s[i] += k * g[i];
                        }
                    }
                }
            }
        }))
    }
}
