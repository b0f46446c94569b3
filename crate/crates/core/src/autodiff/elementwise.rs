//! Elementwise maps and reductions.

use super::{value, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], move |g, _, store| {
            store.add(a, g);
            store.add(b, g);
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], move |g, _, store| {
            store.add(a, g);
            if store.wants(b) {
                let s = store.slot(b);
                for (s, gi) in s.iter_mut().zip(g) {
                    *s -= gi;
                }
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], move |g, nodes, store| {
            if store.wants(a) {
                let yv = value(nodes, b).data();
                let s = store.slot(a);
                for i in 0..s.len() {
                    s[i] += g[i] * yv[i];
                }
            }
            if store.wants(b) {
                let xv = value(nodes, a).data();
                let s = store.slot(b);
                for i in 0..s.len() {
                    s[i] += g[i] * xv[i];
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, &[a], move |g, _, store| {
            let s = store.slot(a);
            for (s, gi) in s.iter_mut().zip(g) {
                *s += c * gi;
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, &[a], move |g, _, store| store.add(a, g))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise map whose derivative is expressed through input and output.
    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let x = self.value(a);
        let out = x.map(f);
        let y_data = out.data().to_vec();
        self.push(out, &[a], move |g, nodes, store| {
            let xv = value(nodes, a).data();
            let s = store.slot(a);
            for i in 0..s.len() {
                s[i] += g[i] * df(xv[i], y_data[i]);
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `ln(max(x, floor))`; the gradient vanishes where the floor is active.
    pub fn ln_floored(&mut self, a: Var, floor: f64) -> Var {
        let x = self.value(a);
        let out = x.map(|v| v.max(floor).ln());
        self.push(out, &[a], move |g, nodes, store| {
            let xv = value(nodes, a).data();
            let s = store.slot(a);
            for i in 0..s.len() {
                if xv[i] > floor {
                    s[i] += g[i] / xv[i];
                }
            }
        })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the interval
    /// or at an inactive bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let out = x.map(|v| v.clamp(lo, hi));
        self.push(out, &[a], move |g, nodes, store| {
            let xv = value(nodes, a).data();
            let s = store.slot(a);
            for i in 0..s.len() {
                if xv[i] >= lo && xv[i] <= hi {
                    s[i] += g[i];
                }
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), &[a], move |g, _, store| {
            let g0 = g[0];
            for s in store.slot(a) {
                *s += g0;
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over all trailing dimensions, giving one value per leading index.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, width) = (x.rows(), x.row_len());
        let data: Vec<f64> = (0..rows).map(|r| x.row(r).iter().sum()).collect();
        self.push(Tensor::from_parts(vec![rows], data), &[a], move |g, _, store| {
            let s = store.slot(a);
            for r in 0..rows {
                for v in &mut s[r * width..(r + 1) * width] {
                    *v += g[r];
                }
            }
        })
    }

    /// Columns `start..start + len` of a `[B, N]` matrix.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            bail!(Shape, "columns {start}..{} of {:?}", start + len, shape);
        }
        let (rows, width) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * width + start..r * width + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), &[a], move |g, _, store| {
            let s = store.slot(a);
            for r in 0..rows {
                for c in 0..len {
                    s[r * width + start + c] += g[r * len + c];
                }
            }
        }))
    }

    /// Euclidean norm of each row; the subgradient at a zero row is zero.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, width) = (x.rows(), x.row_len());
        let norms: Vec<f64> = (0..rows).map(|r| crate::tensor::norm_l2(x.row(r))).collect();
        let saved = norms.clone();
        self.push(Tensor::from_parts(vec![rows], norms), &[a], move |g, nodes, store| {
            let xv = value(nodes, a).data();
            let s = store.slot(a);
            for r in 0..rows {
                if saved[r] > 0.0 {
                    let k = g[r] / saved[r];
                    for i in r * width..(r + 1) * width {
                        s[i] += k * xv[i];
                    }
                }
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_gradients;
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x = t(&[-1.3, -0.2, 0.4, 1.7]);
        for op in 0..6 {
            let err = check_gradients(&[x.clone()], 1e-6, |tape, v| {
                let y = match op {
                    0 => tape.sigmoid(v[0]),
                    1 => tape.tanh(v[0]),
                    2 => tape.exp(v[0]),
                    3 => tape.square(v[0]),
                    4 => tape.abs(v[0]),
                    _ => {
                        let e = tape.exp(v[0]);
                        tape.ln_floored(e, 1e-7)
                    }
                };
                let w = tape.scale(y, 1.5);
                tape.sum(w)
            });
            assert!(err < 1e-6, "op {op}: {err}");
        }
    }

    #[test]
    fn binary_and_row_ops_match_finite_differences() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -0.8, 1.1, 0.5, 0.9, -0.4]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![-0.6, 0.2, 0.7, 1.3, -1.0, 0.25]).unwrap();
        let err = check_gradients(&[a, b], 1e-6, |tape, v| {
            let p = tape.mul(v[0], v[1]).unwrap();
            let q = tape.sub(p, v[1]).unwrap();
            let r = tape.add(q, v[0]).unwrap();
            let n = tape.l2_norm_rows(r);
            let s = tape.sum_rows(v[0]);
            let m = tape.mul(n, s).unwrap();
            tape.mean(m)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn ln_floored_clamps_argument() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[0.0, 1e-9, 2.0]));
        let y = tape.ln_floored(x, 1e-7);
        assert_eq!(tape.value(y).data()[0], (1e-7f64).ln());
        assert_eq!(tape.value(y).data()[1], (1e-7f64).ln());
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.5]);
    }
}
