//! Differentiable affine resampling (spatial-transformer style).
//!
//! Output pixel `(i, j)` sits at normalized coordinates
//! `(x, y) = (2j/(W-1) - 1, 2i/(H-1) - 1)` and reads the input at
//! `theta * [x, y, 1]` by bilinear interpolation; samples that fall outside
//! the image read as zero.
//!
//! The normalized map is folded into pixel units before sampling so that the
//! identity matrix reproduces integer pixel positions exactly.

use super::{value, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Number of parameters in a flattened 2x3 affine matrix.
pub const AFFINE_LEN: usize = 6;

/// Number of pose parameters: `t1, t2, lambda1, lambda2, s, r`.
pub const POSE_LEN: usize = 6;

/// `[a11, a12, a13, a21, a22, a23]` for a pose `[t1, t2, l1, l2, s, r]`.
pub fn affine_from_pose(p: &[f64]) -> [f64; AFFINE_LEN] {
    let (t1, t2, l1, l2, s, r) = (p[0], p[1], p[2], p[3], p[4], p[5]);
    let (sin, cos) = r.sin_cos();
    [
        cos * s - sin * s * l1,
        -sin * s + cos * s * l1,
        t1,
        cos * s * l2 + sin * s,
        -sin * s * l2 + cos * s,
        t2,
    ]
}

/// Jacobian of [`affine_from_pose`], row `k` = d(affine_k)/d(pose).
pub fn affine_pose_jacobian(p: &[f64]) -> [[f64; POSE_LEN]; AFFINE_LEN] {
    let (l1, l2, s, r) = (p[2], p[3], p[4], p[5]);
    let (sin, cos) = r.sin_cos();
    [
        [0.0, 0.0, -sin * s, 0.0, cos - sin * l1, -sin * s - cos * s * l1],
        [0.0, 0.0, cos * s, 0.0, -sin + cos * l1, -cos * s - sin * s * l1],
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, cos * s, cos * l2 + sin, -sin * s * l2 + cos * s],
        [0.0, 0.0, 0.0, -sin * s, -sin * l2 + cos, -cos * s * l2 - sin * s],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    ]
}

/// Sampling position of one output pixel, with its derivative factors.
struct Grid {
    cx: f64,
    cy: f64,
}

impl Grid {
    fn new(h: usize, w: usize) -> Self {
        Self {
            cx: 2.0 / (w - 1) as f64,
            cy: 2.0 / (h - 1) as f64,
        }
    }

    /// Source position in pixel units for output pixel `(i, j)`.
    fn source(&self, a: &[f64], i: usize, j: usize) -> (f64, f64) {
        let (jf, i_f) = (j as f64, i as f64);
        let px = a[0] * jf + a[1] * (self.cy / self.cx) * i_f + (a[2] + 1.0 - a[0] - a[1]) / self.cx;
        let py = a[3] * (self.cx / self.cy) * jf + a[4] * i_f + (a[5] + 1.0 - a[3] - a[4]) / self.cy;
        (px, py)
    }

    fn normalized(&self, i: usize, j: usize) -> (f64, f64) {
        (self.cx * j as f64 - 1.0, self.cy * i as f64 - 1.0)
    }
}

/// Bilinear corner indices and weights; `None` entries lie outside the image.
fn corners(px: f64, py: f64, h: usize, w: usize) -> ([Option<usize>; 4], [f64; 4], f64, f64) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let idx = |yy: f64, xx: f64| -> Option<usize> {
        if xx >= 0.0 && yy >= 0.0 && xx < w as f64 && yy < h as f64 {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    (
        [idx(y0, x0), idx(y0, x0 + 1.0), idx(y0 + 1.0, x0), idx(y0 + 1.0, x0 + 1.0)],
        [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        fx,
        fy,
    )
}

fn warp_values(img: &[f64], theta: &[f64], batch: usize, ch: usize, h: usize, w: usize) -> Vec<f64> {
    let grid = Grid::new(h, w);
    let plane = h * w;
    let mut out = vec![0.0; batch * ch * plane];
    for b in 0..batch {
        let a = &theta[b * AFFINE_LEN..(b + 1) * AFFINE_LEN];
        for i in 0..h {
            for j in 0..w {
                let (px, py) = grid.source(a, i, j);
                let (idx, wt, _, _) = corners(px, py, h, w);
                for c in 0..ch {
                    let src = &img[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                    let v = |k: usize| idx[k].map_or(0.0, |q| src[q]);
                    out[(b * ch + c) * plane + i * w + j] =
                        wt[0] * v(0) + wt[1] * v(1) + (wt[2] * v(2) + wt[3] * v(3));
                }
            }
        }
    }
    out
}

impl Tape {
    /// Resample `images: [B, C, H, W]` through per-example affine maps
    /// `theta: [B, 6]`. Differentiable in both arguments.
    pub fn affine_warp(&mut self, images: Var, theta: Var) -> Result<Var> {
        let shape = self.shape(images).to_vec();
        if shape.len() != 4 {
            bail!(Shape, "affine_warp: images must be [B, C, H, W], got {:?}", shape);
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h < 2 || w < 2 {
            bail!(Shape, "affine_warp: images must be at least 2x2");
        }
        if self.shape(theta) != [batch, AFFINE_LEN] {
            bail!(Shape, "affine_warp: theta must be [{batch}, 6], got {:?}", self.shape(theta));
        }
        if !self.value(theta).all_finite() {
            bail!(NonFinite, "affine_warp: non-finite affine matrix");
        }
        let out = warp_values(self.value(images).data(), self.value(theta).data(), batch, ch, h, w);
        Ok(self.push(Tensor::from_parts(shape, out), &[images, theta], move |g, nodes, store| {
            let img = value(nodes, images).data();
            let th = value(nodes, theta).data();
            let grid = Grid::new(h, w);
            let plane = h * w;
            let want_img = store.wants(images);
            let want_theta = store.wants(theta);
            let mut dimg = if want_img { vec![0.0; img.len()] } else { Vec::new() };
            let mut dtheta = vec![0.0; batch * AFFINE_LEN];
            for b in 0..batch {
                let a = &th[b * AFFINE_LEN..(b + 1) * AFFINE_LEN];
                for i in 0..h {
                    for j in 0..w {
                        let (px, py) = grid.source(a, i, j);
                        let (idx, wt, fx, fy) = corners(px, py, h, w);
                        let (mut dpx, mut dpy) = (0.0, 0.0);
                        for c in 0..ch {
                            let off = (b * ch + c) * plane;
                            let go = g[off + i * w + j];
                            if go == 0.0 {
                                continue;
                            }
                            if want_img {
                                for k in 0..4 {
                                    if let Some(q) = idx[k] {
                                        dimg[off + q] += wt[k] * go;
                                    }
                                }
                            }
                            if want_theta {
                                let v = |k: usize| idx[k].map_or(0.0, |q| img[off + q]);
                                dpx += go * ((1.0 - fy) * (v(1) - v(0)) + fy * (v(3) - v(2)));
                                dpy += go * ((1.0 - fx) * (v(2) - v(0)) + fx * (v(3) - v(1)));
                            }
                        }
                        if want_theta && (dpx != 0.0 || dpy != 0.0) {
                            let (xn, yn) = grid.normalized(i, j);
                            let d = &mut dtheta[b * AFFINE_LEN..(b + 1) * AFFINE_LEN];
                            let (kx, ky) = (dpx / grid.cx, dpy / grid.cy);
                            d[0] += kx * xn;
                            d[1] += kx * yn;
                            d[2] += kx;
                            d[3] += ky * xn;
                            d[4] += ky * yn;
                            d[5] += ky;
                        }
                    }
                }
            }
            if want_img {
                store.add(images, &dimg);
            }
            if want_theta {
                store.add(theta, &dtheta);
            }
        }))
    }

    /// Map poses `[B, 6]` (`t1, t2, lambda1, lambda2, s, r`) to affine matrices `[B, 6]`.
    pub fn compose_affine(&mut self, poses: Var) -> Result<Var> {
        let shape = self.shape(poses).to_vec();
        if shape.len() != 2 || shape[1] != POSE_LEN {
            bail!(Shape, "compose_affine: poses must be [B, 6], got {:?}", shape);
        }
        let batch = shape[0];
        let pv = self.value(poses).data();
        let mut out = Vec::with_capacity(batch * AFFINE_LEN);
        for b in 0..batch {
            out.extend_from_slice(&affine_from_pose(&pv[b * POSE_LEN..(b + 1) * POSE_LEN]));
        }
        Ok(self.push(Tensor::from_parts(vec![batch, AFFINE_LEN], out), &[poses], move |g, nodes, store| {
            let pv = value(nodes, poses).data();
            let s = store.slot(poses);
            for b in 0..batch {
                let jac = affine_pose_jacobian(&pv[b * POSE_LEN..(b + 1) * POSE_LEN]);
                for (k, row) in jac.iter().enumerate() {
                    let gk = g[b * AFFINE_LEN + k];
                    for (q, d) in row.iter().enumerate() {
                        s[b * POSE_LEN + q] += gk * d;
                    }
                }
            }
        }))
    }
}
