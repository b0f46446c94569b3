//! Data manifolds: the decoder interface, learned VAE-GAN manifolds,
//! projections onto exact or approximate manifolds, and distance diagnostics.

mod histogram;
mod project;
mod tangent;
mod vaegan;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub use histogram::Histogram;
pub use project::{nearest_neighbors, project_decoder, project_knn, KnnAnchor, ProjectionConfig};
pub use tangent::{decoder_jacobian, tangent_alignment, TangentAlignment};
pub use vaegan::{
    kl_divergence, kl_monte_carlo, train_manifold, ManifoldArch, ManifoldConfig, ManifoldModel, Scope,
    TrainingReport, VaeGanLosses, DIS_PROB_FLOOR,
};

/// A differentiable map from latent codes `[B, d]` to images `[B, C, H, W]`
/// with a box-shaped valid latent set.
///
/// Decoders may tie batch rows to per-example state (for example a fixed
/// prototype per row); [`Decoder::select`] re-indexes that state.
pub trait Decoder: Sync {
    fn latent_dim(&self) -> usize;

    /// Per-coordinate lower and upper latent bounds.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Per-example image shape.
    fn output_shape(&self) -> &[usize];

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var>;

    /// A decoder whose row `i` behaves like row `rows[i]` of this one.
    fn select(&self, rows: &[usize]) -> Result<Box<dyn Decoder>>;

    fn decode_values(&self, z: &crate::Tensor) -> Result<crate::Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    Decoder,
    KnnTestCentered,
    KnnMeanCentered,
}

/// A point projected onto a manifold approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    /// The projected image, flattened.
    pub projected: Vec<f64>,
    /// Latent code (decoder) or least-squares coefficients (k-NN).
    pub coefficients: Vec<f64>,
    /// `||x - pi(x)||_2`.
    pub distance: f64,
    pub method: ProjectionMethod,
}
