//! Alignment of loss gradients with the tangent space of a decoder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Decoder;
use crate::autodiff::{Reduction, Tape};
use crate::error::{bail, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Jacobian `[D, d]` of row 0 of `decoder` at latent `z`.
pub fn decoder_jacobian(decoder: &dyn Decoder, z: &[f64]) -> Result<DMatrix<f64>> {
    let d = decoder.latent_dim();
    if z.len() != d {
        bail!(Shape, "latent code has {} values, decoder expects {d}", z.len());
    }
    let dim: usize = decoder.output_shape().iter().product();
    // One copy of z per output pixel; seeding pixel i in copy i yields row i.
    let rep = decoder.select(&vec![0; dim])?;
    let mut tape = Tape::new();
    let zs = tape.param(Tensor::from_parts(vec![dim, d], z.repeat(dim)));
    let out = rep.decode(&mut tape, zs)?;
    let mut seed = vec![0.0; dim * dim];
    for i in 0..dim {
        seed[i * dim + i] = 1.0;
    }
    let g = tape.backward_with_seed(out, &seed)?.get_or_zeros(zs);
    Ok(DMatrix::from_fn(dim, d, |i, j| g.data()[i * d + j]))
}

/// `||P g|| / ||g||` for the orthogonal projector `P` onto the column span of
/// `basis`; `None` when `g` is zero.
pub fn subspace_cosine(g: &[f64], basis: &DMatrix<f64>) -> Option<f64> {
    let gv = DVector::from_column_slice(g);
    let gn = gv.norm();
    if gn == 0.0 {
        return None;
    }
    let svd = basis.clone().svd(true, false);
    let u = svd.u.as_ref().expect("U was computed");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = f64::EPSILON * basis.nrows().max(basis.ncols()) as f64 * smax;
    let mut proj2 = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            proj2 += u.column(k).dot(&gv).powi(2);
        }
    }
    Some((proj2.sqrt() / gn).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentAlignment {
    /// Cosine between the loss gradient and the tangent space; absent when
    /// the gradient vanishes.
    pub cosine: Option<f64>,
    pub gradient_norm: f64,
}

/// Compare the image-space loss gradient at `x: [1, C, H, W]` with the tangent
/// space of row 0 of `decoder` at `z`.
pub fn tangent_alignment(model: &dyn Model, decoder: &dyn Decoder, x: &Tensor, y: usize, z: &[f64]) -> Result<TangentAlignment> {
    if x.rows() != 1 {
        bail!(Shape, "tangent alignment takes a single image, got {:?}", x.shape());
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let logits = model.logits(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, &[y], Reduction::Sum)?;
    let g = tape.backward(loss)?.get_or_zeros(xv);
    let jac = decoder_jacobian(decoder, z)?;
    Ok(TangentAlignment { cosine: subspace_cosine(g.data(), &jac), gradient_norm: g.norm_l2() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_cases() {
        let basis = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let orth = [1.0, -1.0, 1.0, 0.0];
        assert!(subspace_cosine(&orth, &basis).unwrap().abs() < 1e-10);
        let col = [1.0, 1.0, 0.0, 0.0];
        assert!((subspace_cosine(&col, &basis).unwrap() - 1.0).abs() < 1e-10);
        assert_eq!(subspace_cosine(&[0.0; 4], &basis), None);
    }
}
