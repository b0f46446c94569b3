//! Adam with L2 weight decay and per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the L2 penalty added to every gradient.
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate by [`AdamState::end_epoch`].
    pub lr_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            lr_decay: 1.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_lr_decay(mut self, decay: f64) -> Self {
        self.lr_decay = decay;
        self
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// State for parameter groups of the given lengths.
    pub fn new(config: AdamConfig, lens: &[usize]) -> Self {
        Self {
            config,
            lr: config.learning_rate,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let lens: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self::new(config, &lens)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.lr_decay;
    }

    /// One descent step. Non-finite gradients are rejected and leave both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(InvalidArgument, "learning rate must be positive and finite, got {}", self.lr);
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            bail!(InvalidArgument, "expected {} parameter groups, got {} / {}", self.m.len(), params.len(), grads.len());
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                bail!(Shape, "parameter group {i} has length {} / gradient {}, expected {}", p.len(), g.len(), self.m[i].len());
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                bail!(NonFinite, "gradient of group {i} is not finite at {j}");
            }
        }
        let AdamConfig { beta1, beta2, epsilon, weight_decay, .. } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] + weight_decay * p[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let mut ps: Vec<&mut [f64]> = params.iter_mut().map(Tensor::data_mut).collect();
        let gs: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        self.step(&mut ps, &gs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(AdamConfig::new(0.1), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        s.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(AdamConfig::new(0.01), &[2]);
        let mut p = vec![0.0, 0.0];
        s.step(&mut [&mut p], &[&[3.0, -0.2]]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut s = AdamState::new(AdamConfig::new(0.1), &[2]);
        let mut p = vec![1.0, 1.0];
        s.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let snapshot = (p.clone(), s.m.clone(), s.v.clone(), s.steps());
        assert!(s.step(&mut [&mut p], &[&[f64::NAN, 1.0]]).is_err());
        assert_eq!(snapshot, (p, s.m.clone(), s.v.clone(), s.steps()));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = AdamState::new(AdamConfig::new(0.05), &[1]);
        let mut p = vec![4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            s.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn epoch_decay_is_multiplicative() {
        let mut s = AdamState::new(AdamConfig::new(0.01).with_lr_decay(0.5), &[1]);
        s.end_epoch();
        s.end_epoch();
        assert!((s.learning_rate() - 0.0025).abs() < 1e-15);
    }
}
