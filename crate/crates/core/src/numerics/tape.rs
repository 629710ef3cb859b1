//! Wengert-list reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and a
//! boxed [`Op`] that knows how to map an upstream gradient onto its inputs.
//! [`Tape::backward`] replays the list in reverse. The graph is static per
//! step: build a fresh tape, run forward, call backward once, drop it.

use super::param::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an operation sees when its vector-Jacobian product is requested.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// Whether each input wants a gradient; ops may return `None` for the rest.
    pub needs: Vec<bool>,
}

/// A differentiable operation recorded on the tape.
pub trait Op<T: Scalar> {
    fn name(&self) -> &'static str;

    /// One entry per input, each the same length as that input's data.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: Vec<Var>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Records `op` producing `value` from `inputs`. Rejects non-finite outputs.
    pub fn push(&mut self, op: Box<dyn Op<T>>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op: Some(op), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Puts every parameter of `store` on the tape as a gradient-carrying leaf.
    pub fn bind_params(&mut self, store: &ParamStore<T>) {
        let vars: Vec<Var> = store.iter().map(|p| self.var(p.tensor.clone())).collect();
        self.bound = vars;
    }

    /// Binds externally created leaves as the parameter set, in [`ParamId`] order.
    pub fn bind(&mut self, vars: Vec<Var>) {
        self.bound = vars;
    }

    pub fn bound(&self) -> &[Var] {
        &self.bound
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound[id.index()]
    }

    /// Corrupts the backward pass of every op named `name` (negative-control fixture).
    #[doc(hidden)]
    /// Distinct names of the operations recorded so far, sorted.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self.nodes.iter().filter_map(|n| n.op.as_ref().map(|o| o.name())).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    pub fn inject_fault(&mut self, name: impl Into<String>) {
        self.fault = Some(name.into());
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {}", super::tensor::shape_str(self.shape(loss))),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let mut input_grads = op.backward(&ctx);
            if self.fault.as_deref() == Some(op.name()) {
                for g in input_grads.iter_mut().flatten() {
                    for v in g.iter_mut() {
                        *v = *v * T::of(1.5) + T::of(1e-3);
                    }
                }
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: format!("{} (backward)", op.name()) });
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, bound: self.bound.clone() })
    }
}

/// Gradients of the leaves of a tape with respect to one scalar.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.get(self.bound[id.index()])
    }
}
