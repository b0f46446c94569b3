//! Projections onto a decoder's image and onto nearest-neighbor subspaces.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Decoder, ProjectionMethod, ProjectionResult};
use crate::autodiff::Tape;
use crate::error::{bail, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{norm_l2, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: usize,
    /// Uniform random starting points in the latent box, in addition to any
    /// supplied starting points.
    pub random_restarts: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { iterations: 100, learning_rate: 0.09, decay: 0.95, decay_every: 10, random_restarts: 1, seed: 0 }
    }
}

/// Find `z` in the decoder's latent box minimizing `||x_b - dec(z_b)||^2` for
/// every row `b` of `targets`, starting from each tensor in `starts` and from
/// `random_restarts` uniform draws; the best iterate per row is returned.
pub fn project_decoder(
    targets: &Tensor,
    decoder: &dyn Decoder,
    starts: &[Tensor],
    config: &ProjectionConfig,
) -> Result<Vec<ProjectionResult>> {
    let b = targets.rows();
    let d = decoder.latent_dim();
    let (lo, hi) = decoder.bounds();
    if targets.shape()[1..] != *decoder.output_shape() {
        bail!(Shape, "targets {:?} do not match decoder output {:?}", targets.shape(), decoder.output_shape());
    }
    if starts.is_empty() && config.random_restarts == 0 {
        bail!(InvalidArgument, "projection needs at least one starting point");
    }
    let mut inits: Vec<Tensor> = Vec::new();
    for s in starts {
        if s.shape() != [b, d] {
            bail!(Shape, "starting point must be [{b}, {d}], got {:?}", s.shape());
        }
        inits.push(s.clone());
    }
    for r in 0..config.random_restarts {
        let mut data = Vec::with_capacity(b * d);
        for row in 0..b {
            let mut g = rng::stream(config.seed, "projection", (r * b + row) as u64);
            for j in 0..d {
                data.push(if lo[j] < hi[j] { g.random_range(lo[j]..=hi[j]) } else { lo[j] });
            }
        }
        inits.push(Tensor::from_parts(vec![b, d], data));
    }
    let clamp = |z: &mut [f64]| {
        for (i, v) in z.iter_mut().enumerate() {
            let j = i % d;
            *v = v.clamp(lo[j], hi[j]);
        }
    };
    let mut best_obj = vec![f64::INFINITY; b];
    let mut best_z = vec![0.0; b * d];
    let mut best_x = vec![0.0; targets.len()];
    let plane = targets.row_len();
    for init in inits {
        let mut z = init.into_data();
        clamp(&mut z);
        let mut adam = AdamState::new(AdamConfig::new(config.learning_rate), &[z.len()]);
        for it in 0..=config.iterations {
            let mut tape = Tape::new();
            let zv = tape.param(Tensor::from_parts(vec![b, d], z.clone()));
            let out = decoder.decode(&mut tape, zv)?;
            let t = tape.constant(targets.clone());
            let diff = tape.sub(out, t)?;
            let sq = tape.square(diff);
            let per_row = tape.sum_rows(sq);
            let xs = tape.value(out);
            for (row, &obj) in tape.value(per_row).data().iter().enumerate() {
                if obj < best_obj[row] {
                    best_obj[row] = obj;
                    best_z[row * d..(row + 1) * d].copy_from_slice(&z[row * d..(row + 1) * d]);
                    best_x[row * plane..(row + 1) * plane].copy_from_slice(xs.row(row));
                }
            }
            if it == config.iterations {
                break;
            }
            let total = tape.sum(per_row);
            let g = tape.backward(total)?.get_or_zeros(zv);
            if config.decay_every > 0 && it > 0 && it % config.decay_every == 0 {
                adam.set_learning_rate(adam.learning_rate() * config.decay);
            }
            adam.step(&mut [&mut z], &[g.data()])?;
            clamp(&mut z);
        }
    }
    Ok((0..b)
        .map(|row| {
            let projected = best_x[row * plane..(row + 1) * plane].to_vec();
            let diff: Vec<f64> = projected.iter().zip(targets.row(row)).map(|(p, x)| x - p).collect();
            ProjectionResult {
                distance: norm_l2(&diff),
                projected,
                coefficients: best_z[row * d..(row + 1) * d].to_vec(),
                method: ProjectionMethod::Decoder,
            }
        })
        .collect())
}

/// Indices of the `k` rows of `pool` closest to `query` in L2, nearest first
/// (ties broken by index).
pub fn nearest_neighbors(pool: &Tensor, query: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        bail!(InvalidArgument, "k must be at least 1");
    }
    if k > pool.rows() {
        bail!(InvalidArgument, "k = {k} exceeds the {} available images", pool.rows());
    }
    if pool.row_len() != query.len() {
        bail!(Shape, "query has {} values, pool rows have {}", query.len(), pool.row_len());
    }
    let mut d: Vec<(f64, usize)> = (0..pool.rows())
        .map(|i| {
            let s: f64 = pool.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d[..k].iter().map(|&(_, i)| i).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnAnchor {
    /// Columns `x_i - x` around the clean test image `x`.
    TestImage,
    /// Columns `x_i - mean(x_i)`.
    NeighborMean,
}

/// Least-squares projection of `x_tilde` onto the affine span of
/// `neighbors: [k, D]` around the chosen anchor, with the
/// minimum-norm coefficients for rank-deficient bases.
pub fn project_knn(x_tilde: &[f64], x: &[f64], neighbors: &Tensor, anchor: KnnAnchor) -> Result<ProjectionResult> {
    let k = neighbors.rows();
    let dim = x_tilde.len();
    if k == 0 {
        bail!(InvalidArgument, "projection needs at least one neighbor");
    }
    if neighbors.row_len() != dim || x.len() != dim {
        bail!(Shape, "neighbor, test and adversarial images must have {dim} values");
    }
    let center: Vec<f64> = match anchor {
        KnnAnchor::TestImage => x.to_vec(),
        KnnAnchor::NeighborMean => (0..dim)
            .map(|p| (0..k).map(|i| neighbors.row(i)[p]).sum::<f64>() / k as f64)
            .collect(),
    };
    let xm = DMatrix::from_fn(dim, k, |p, i| neighbors.row(i)[p] - center[p]);
    let delta = DVector::from_iterator(dim, x_tilde.iter().zip(&center).map(|(a, c)| a - c));
    let beta = least_squares(&xm, &delta);
    let fitted = &xm * &beta;
    let residual = &delta - &fitted;
    Ok(ProjectionResult {
        projected: center.iter().zip(fitted.iter()).map(|(c, f)| c + f).collect(),
        coefficients: beta.iter().copied().collect(),
        distance: residual.norm(),
        method: match anchor {
            KnnAnchor::TestImage => ProjectionMethod::KnnTestCentered,
            KnnAnchor::NeighborMean => ProjectionMethod::KnnMeanCentered,
        },
    })
}

/// Minimum-norm least-squares solution by complete orthogonal
/// decomposition: a rank-revealing column-pivoted QR of `a`, then a QR of the
/// leading rows of `R` transposed.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let (q, r, p) = a.clone().col_piv_qr().unpack();
    let diag: Vec<f64> = (0..r.nrows().min(n)).map(|i| r[(i, i)]).collect();
    let tol = f64::EPSILON * a.nrows().max(n) as f64 * diag.first().map_or(0.0, |d| d.abs());
    let rank = diag.iter().take_while(|d| d.abs() > tol).count();
    let mut beta = DVector::zeros(n);
    if rank == 0 {
        return beta;
    }
    let c = (q.transpose() * b).rows(0, rank).into_owned();
    let (z, s) = r.rows(0, rank).transpose().qr().unpack();
    let w = s.transpose().solve_lower_triangular(&c).expect("leading diagonal is nonzero");
    beta.copy_from(&(z * w));
    p.inv_permute_rows(&mut beta);
    beta
}
