//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and a backward closure
//! to the [`Tape`]. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because a node can only refer
//! to nodes created before it.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod reduce;
mod special;

pub use conv::{Conv2dGeom, TransposedGeom};
pub use norm::BatchStats;
pub use pool::Alignment;
pub use reduce::STD_EPS;
pub use special::{margin_psi, LDE_MASS_EPS};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::ParamId;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Records a computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    pattern: DefaultHasher,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            pattern: DefaultHasher::new(),
        }
    }

    /// A tape that never records backward closures. Forward values are identical.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Leaf bound to a parameter; its gradient is routed back to the store.
    pub fn param_leaf(&mut self, id: ParamId, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_node(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every piecewise branch taken so far (ReLU masks and the like).
    ///
    /// Two evaluations with equal patterns ran on the same smooth piece of the
    /// function, which is what makes a finite-difference comparison valid.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern.finish()
    }

    pub(crate) fn record_pattern(&mut self, bits: impl Iterator<Item = bool>) {
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                word.hash(&mut self.pattern);
                word = 0;
                n = 0;
            }
        }
        (word, n).hash(&mut self.pattern);
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Append an op result. `backward` is dropped when no input requires a gradient.
    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            param: None,
        }))
    }

    /// Reverse sweep from a scalar output. Returns gradients for every leaf that requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", out.value.shape()),
            ));
        }
        self.backward_with(output, Tensor::ones(out.value.shape()))
    }

    /// Reverse sweep seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::shape("backward", "seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                g.ensure_finite("backward")?;
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(param, gradient)` pairs; a shared parameter appears once per leaf.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(i, id)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let y = tape.add(y, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn inference_tape_records_no_grad() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let s = tape.sum_all(x).unwrap();
        assert!(!tape.requires_grad(s));
        assert!(tape.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(tape.backward(x).is_err());
    }
}
