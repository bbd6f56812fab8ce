//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every differentiable operation appends one node
//! holding its output value and, when any input requires a gradient, a
//! backward rule. Nodes are appended in execution order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod reduce;
mod resize;
mod shape;

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use elementwise::Unary;
pub use loss::bce_logit;
pub use norm::BatchStats;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward<T: Scalar> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>);
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
}

/// Batch-norm statistics recorded during a training-mode forward pass so the
/// caller can fold them into the running buffers afterwards.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

/// The tape. Confined to one thread; values are plain tensors.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> core::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("training", &self.training)
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Training-mode tape: parameters require gradients and batch norm uses
    /// batch statistics.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation-mode tape: no parameter gradients, running statistics.
    pub fn inference() -> Self {
        Self {
            training: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. The tape can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bn_updates.clear();
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a copy of a stored parameter on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = self.training && p.trainable;
        let v = self.leaf(p.value.clone(), requires_grad);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// `(param, gradient)` pairs for every parameter leaf with a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { Some(Box::new(op)) } else { None },
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let len = self.nodes[loss.0].value.len();
        if len != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::ones(&shape));
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Some(op) => {
                    let mut ctx = BackwardCtx {
                        nodes: &self.nodes,
                        grads: &mut grads,
                    };
                    op.backward(&mut ctx, &g);
                }
                None => leaf_grads.push((i, g)),
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// View handed to backward rules: read access to forward values, write
/// access to the gradient slots of inputs.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised (on first use) gradient buffer of `v`.
    pub fn grad_mut(&mut self, v: Var) -> &mut [T] {
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut()).unwrap_or(&mut [])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gives_two_w() {
        let mut g = Graph::<f64>::new();
        let wt = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let w = g.leaf(wt.clone(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &wt.map(|x| 2.0 * x));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::ones(&[3]), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &Tensor::full(&[3], 2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::ones(&[3]), true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn reset_leaves_no_nodes() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::ones(&[3]), true);
        let r = g.relu(w);
        let s = g.sum(r);
        g.backward(s).unwrap();
        g.reset();
        assert_eq!(g.len(), 0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let w = g.leaf(Tensor::ones(&[2]), true);
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(w).is_some());
    }
}
