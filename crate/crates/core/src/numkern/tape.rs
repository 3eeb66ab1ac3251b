//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! Every forward op appends one node (value + op record) to the tape.
//! `backward` walks the records in strict reverse execution order and
//! accumulates adjoints into each node that requires a gradient. The tape
//! is rebuilt per forward pass; there is no graph caching.

use crate::error::{Error, Result};
use crate::numkern::ops::{backward_op, Op};
use crate::numkern::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Op<T>,
}

/// Ordered record of executed operations, with values and gradients.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Insert an input tensor as a leaf node.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Mark a computed value's grad requirement from its inputs.
    pub(crate) fn push_computed(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.push(value, op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss node.
    ///
    /// Adjoints accumulate left-to-right in record order, making repeated
    /// runs bitwise identical at fixed precision.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).requires_grad {
            return Err(Error::Unsupported(
                "backward on a value that requires no gradient".to_string(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_op(&self.nodes, i, &g, &mut grads)?;
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}
