//! Classification losses on logits.

use super::{Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// How per-example losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Tape {
    fn check_labels(&self, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            bail!(Shape, "logits {:?} do not match {} labels", shape, labels.len());
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            bail!(InvalidArgument, "label {bad} out of range for {k} classes");
        }
        Ok((shape[0], k))
    }

    /// Per-example `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn cross_entropy_each(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, k) = self.check_labels(logits, labels)?;
        let lv = self.value(logits).data();
        let mut losses = Vec::with_capacity(batch);
        let mut probs = vec![0.0; batch * k];
        for r in 0..batch {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            losses.push(max + z.ln() - row[labels[r]]);
        }
        let labels = labels.to_vec();
        Ok(self.push(Tensor::from_parts(vec![batch], losses), &[logits], move |g, _, store| {
            let s = store.slot(logits);
            for r in 0..batch {
                for j in 0..k {
                    let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                    s[r * k + j] += g[r] * (probs[r * k + j] - onehot);
                }
            }
        }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let each = self.cross_entropy_each(logits, labels)?;
        Ok(match reduction {
            Reduction::Sum => self.sum(each),
            Reduction::Mean => self.mean(each),
        })
    }

    /// Per-example `max(-kappa, l_y - max_{j != y} l_j)`.
    pub fn margin_each(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let (batch, k) = self.check_labels(logits, labels)?;
        if k < 2 {
            bail!(InvalidArgument, "margin needs at least two classes");
        }
        let lv = self.value(logits).data();
        let mut out = Vec::with_capacity(batch);
        // (active, runner-up index) per row
        let mut route = Vec::with_capacity(batch);
        for r in 0..batch {
            let row = &lv[r * k..(r + 1) * k];
            let y = labels[r];
            let mut other = if y == 0 { 1 } else { 0 };
            for j in 0..k {
                if j != y && row[j] > row[other] {
                    other = j;
                }
            }
            let m = row[y] - row[other];
            if m > -kappa {
                out.push(m);
                route.push((true, other));
            } else {
                out.push(-kappa);
                route.push((false, other));
            }
        }
        let labels = labels.to_vec();
        Ok(self.push(Tensor::from_parts(vec![batch], out), &[logits], move |g, _, store| {
            let s = store.slot(logits);
            for r in 0..batch {
                let (active, other) = route[r];
                if active {
                    s[r * k + labels[r]] += g[r];
                    s[r * k + other] -= g[r];
                }
            }
        }))
    }
}
