//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables together with a
//! closure that maps the output cotangent back onto the inputs. Calling
//! [`Tape::backward`] replays the record in reverse. Nodes whose inputs do not
//! require gradients are stored without a backward closure.

mod conv;
mod elementwise;
mod gemm;
mod loss;
mod norm;
mod warp;

pub use gemm::gemm;
pub use elementwise::sigmoid;
pub use loss::Reduction;
pub use norm::BatchStats;
pub use warp::{affine_from_pose, affine_pose_jacobian, AFFINE_LEN, POSE_LEN};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Node], &mut GradStore)>;

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Cotangent accumulators indexed by node.
pub(crate) struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
}

impl GradStore {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable accumulator for `v`, zero-initialized on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [f64] {
        let len = self.lens[v.0];
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(v);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }
}

pub(crate) fn value(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g))
    }
}

/// A single-threaded operation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a derived node. `backward` receives the output cotangent, the node
    /// table and the gradient store; it is dropped when no parent needs gradients.
    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&[f64], &[Node], &mut GradStore) + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a 0-d (single element) loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            bail!(
                Untaped,
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            );
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`) to every
    /// variable that requires gradients.
    pub fn backward_with_seed(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        let node = &self.nodes[output.0];
        if !node.requires_grad {
            bail!(
                Untaped,
                "variable {} does not depend on any gradient-requiring input",
                output.0
            );
        }
        if seed.len() != node.value.len() {
            bail!(
                Shape,
                "seed of length {} for output of shape {:?}",
                seed.len(),
                node.value.shape()
            );
        }
        let n = output.0 + 1;
        let mut store = GradStore {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.requires_grad).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        store.grads[output.0] = Some(seed.to_vec());
        for i in (0..n).rev() {
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            let Some(g) = store.grads[i].take() else {
                continue;
            };
            backward(&g, &self.nodes, &mut store);
            store.grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: store.grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Reshape without copying semantics (values are cloned on the tape).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, &[a], move |g, _, store| store.add(a, g)))
    }
}
