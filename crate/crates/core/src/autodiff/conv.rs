//! Dense layers: affine maps, 2-d convolution and its transpose.

use super::gemm::gemm;
use super::{value, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold `batch` images (`[B, C, H, W]`) into a `(C*k*k) x (B*Ho*Wo)` matrix.
fn im2col(x: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = batch * ho * wo;
    let mut cols = vec![0.0; g.col_rows() * cols_n];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oi in 0..ho {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let base = (b * ho + oi) * wo;
                        let src_row = &src[ii as usize * g.width..(ii as usize + 1) * g.width];
                        for oj in 0..wo {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < g.width as isize {
                                dst[base + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into image layout.
fn col2im(cols: &[f64], batch: usize, g: &ConvGeometry, out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = batch * ho * wo;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..batch {
                    let dst = &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oi in 0..ho {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let base = (b * ho + oi) * wo;
                        for oj in 0..wo {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < g.width as isize {
                                dst[ii as usize * g.width + jj as usize] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, B*S]` (channel-major) to `[B, O, S]` (batch-major).
fn channel_to_batch_major(src: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..channels {
        for b in 0..batch {
            let s = &src[(o * batch + b) * spatial..(o * batch + b + 1) * spatial];
            out[(b * channels + o) * spatial..(b * channels + o + 1) * spatial].copy_from_slice(s);
        }
    }
    out
}

fn batch_to_channel_major(src: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for o in 0..channels {
            let s = &src[(b * channels + o) * spatial..(b * channels + o + 1) * spatial];
            out[(o * batch + b) * spatial..(o * batch + b + 1) * spatial].copy_from_slice(s);
        }
    }
    out
}

impl Tape {
    /// `x @ w^T + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            bail!(Shape, "linear: input {:?} incompatible with weight {:?}", xs, ws);
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                bail!(Shape, "linear: bias {:?} for {} outputs", self.shape(b), fan_out);
            }
        }
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..batch {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let result = Tensor::from_parts(vec![batch, fan_out], out);
        Ok(self.push(result, &parents, move |g, nodes, store| {
            if store.wants(x) {
                let wv = value(nodes, w).data();
                gemm(batch, fan_out, fan_in, 1.0, g, false, wv, false, 1.0, store.slot(x));
            }
            if store.wants(w) {
                let xv = value(nodes, x).data();
                gemm(fan_out, batch, fan_in, 1.0, g, true, xv, false, 1.0, store.slot(w));
            }
            if let Some(b) = b {
                if store.wants(b) {
                    let s = store.slot(b);
                    for r in 0..batch {
                        for o in 0..fan_out {
                            s[o] += g[r * fan_out + o];
                        }
                    }
                }
            }
        }))
    }

    /// Plain matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            bail!(Shape, "matmul: {:?} x {:?}", as_, bs);
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], move |g, nodes, store| {
            if store.wants(a) {
                let bv = value(nodes, b).data();
                gemm(m, n, k, 1.0, g, false, bv, true, 1.0, store.slot(a));
            }
            if store.wants(b) {
                let av = value(nodes, a).data();
                gemm(k, m, n, 1.0, av, true, g, false, 1.0, store.slot(b));
            }
        }))
    }

    /// 2-d cross-correlation. `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            bail!(Shape, "conv2d: input {:?} incompatible with weight {:?}", xs, ws);
        }
        if stride == 0 || xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            bail!(Shape, "conv2d: kernel {} does not fit input {:?}", ws[2], xs);
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        let (batch, out_c) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let spatial = ho * wo;
        let cols_n = batch * spatial;
        let krows = geom.col_rows();
        let cols = im2col(self.value(x).data(), batch, &geom);
        let mut out_cm = vec![0.0; out_c * cols_n];
        gemm(out_c, krows, cols_n, 1.0, self.value(w).data(), false, &cols, false, 0.0, &mut out_cm);
        let mut out = channel_to_batch_major(&out_cm, batch, out_c, spatial);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for bi in 0..batch {
                for o in 0..out_c {
                    for v in &mut out[(bi * out_c + o) * spatial..(bi * out_c + o + 1) * spatial] {
                        *v += bv[o];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let result = Tensor::from_parts(vec![batch, out_c, ho, wo], out);
        Ok(self.push(result, &parents, move |g, nodes, store| {
            let g_cm = batch_to_channel_major(g, batch, out_c, spatial);
            if store.wants(w) {
                gemm(out_c, cols_n, krows, 1.0, &g_cm, false, &cols, true, 1.0, store.slot(w));
            }
            if store.wants(x) {
                let wv = value(nodes, w).data();
                let mut dcols = vec![0.0; krows * cols_n];
                gemm(krows, out_c, cols_n, 1.0, wv, true, &g_cm, false, 0.0, &mut dcols);
                col2im(&dcols, batch, &geom, store.slot(x));
            }
            if let Some(b) = b {
                if store.wants(b) {
                    let s = store.slot(b);
                    for o in 0..out_c {
                        s[o] += g_cm[o * cols_n..(o + 1) * cols_n].iter().sum::<f64>();
                    }
                }
            }
        }))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] in its input).
    /// `x: [B, Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`; output extent is
    /// `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            bail!(Shape, "conv_transpose2d: input {:?} incompatible with weight {:?}", xs, ws);
        }
        let (batch, in_c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, k) = (ws[1], ws[2]);
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            bail!(Shape, "conv_transpose2d: padding {} too large", padding);
        }
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeometry {
            channels: out_c,
            height: full_h - 2 * padding,
            width: full_w - 2 * padding,
            kernel: k,
            stride,
            padding,
        };
        if geom.out_height() != h || geom.out_width() != wd {
            bail!(Shape, "conv_transpose2d: geometry is not invertible for input {:?}", xs);
        }
        let spatial = h * wd;
        let cols_n = batch * spatial;
        let krows = geom.col_rows();
        let x_cm = batch_to_channel_major(self.value(x).data(), batch, in_c, spatial);
        let mut cols = vec![0.0; krows * cols_n];
        gemm(krows, in_c, cols_n, 1.0, self.value(w).data(), true, &x_cm, false, 0.0, &mut cols);
        let (oh, ow) = (geom.height, geom.width);
        let mut out = vec![0.0; batch * out_c * oh * ow];
        col2im(&cols, batch, &geom, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            let plane = oh * ow;
            for bi in 0..batch {
                for o in 0..out_c {
                    for v in &mut out[(bi * out_c + o) * plane..(bi * out_c + o + 1) * plane] {
                        *v += bv[o];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let result = Tensor::from_parts(vec![batch, out_c, oh, ow], out);
        Ok(self.push(result, &parents, move |g, nodes, store| {
            let gcols = im2col(g, batch, &geom);
            if store.wants(x) {
                let wv = value(nodes, w).data();
                let mut dx_cm = vec![0.0; in_c * cols_n];
                gemm(in_c, krows, cols_n, 1.0, wv, false, &gcols, false, 0.0, &mut dx_cm);
                let dx = channel_to_batch_major(&dx_cm, batch, in_c, spatial);
                store.add(x, &dx);
            }
            if store.wants(w) {
                gemm(in_c, cols_n, krows, 1.0, &x_cm, false, &gcols, true, 1.0, store.slot(w));
            }
            if let Some(b) = b {
                if store.wants(b) {
                    let plane = oh * ow;
                    let s = store.slot(b);
                    for bi in 0..batch {
                        for o in 0..out_c {
                            s[o] += g[(bi * out_c + o) * plane..(bi * out_c + o + 1) * plane]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_gradients;
    use super::*;

    fn wave(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f64) * 0.731 + phase).sin()).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; bn * o * ho * wo];
        for bi in 0..bn {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.data()[((bi * c + ic) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x = wave(&[2, 3, 7, 6], 0.1);
        let w = wave(&[4, 3, 4, 4], 0.7);
        let b = wave(&[4], 1.9);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let want = conv_direct(&x, &w, &b, 2, 1);
        assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
        for (p, q) in tape.value(y).data().iter().zip(&want) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let ins = [wave(&[2, 2, 5, 5], 0.3), wave(&[3, 2, 4, 4], 1.1), wave(&[3], 2.0)];
        let err = check_gradients(&ins, 1e-6, |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let s = tape.square(y);
            tape.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry and no bias.
        let x = wave(&[2, 3, 8, 8], 0.2);
        let w = wave(&[4, 3, 4, 4], 0.9);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let cx = tape.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = wave(tape.shape(cx), 1.3);
        let yv = tape.constant(y.clone());
        let ty = tape.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
        assert_eq!(tape.shape(ty), x.shape());
        let lhs = crate::tensor::dot(tape.value(cx).data(), y.data());
        let rhs = crate::tensor::dot(x.data(), tape.value(ty).data());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let ins = [wave(&[2, 3, 3, 3], 0.4), wave(&[3, 2, 4, 4], 0.8), wave(&[2], 0.1)];
        let err = check_gradients(&ins, 1e-6, |tape, v| {
            let y = tape.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let s = tape.square(y);
            tape.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_and_matmul_gradients_match_finite_differences() {
        let ins = [wave(&[3, 4], 0.0), wave(&[5, 4], 0.5), wave(&[5], 1.0), wave(&[5, 2], 1.5)];
        let err = check_gradients(&ins, 1e-6, |tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2])).unwrap();
            let z = tape.matmul(y, v[3]).unwrap();
            let s = tape.square(z);
            tape.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(tape.linear(x, w, None).is_err());
    }
}
