//! Adversarial robustness laboratory.
//!
//! Regular (image-space) and on-manifold (latent-space) attacks, adversarial
//! training variants, exact and learned data manifolds, and an experiment
//! harness, all on a synthetic character dataset whose generative process is
//! known and differentiable.

pub mod attacks;
pub mod autodiff;
pub mod defenses;
pub mod error;
pub mod fonts;
pub mod harness;
pub mod manifold;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod serialize;
pub mod tensor;
pub mod toy;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
