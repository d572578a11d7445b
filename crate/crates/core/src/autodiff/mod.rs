//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s during a
//! forward pass. [`Tape::backward`] then walks the record once in reverse,
//! accumulating `∂root/∂leaf` into every leaf created with
//! [`Tape::param`]. A tape is built fresh for every forward pass.
//!
//! ```
//! use csg::autodiff::Tape;
//! use csg::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let y = x.square().sum();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

pub use check::{gradient_check, DEFAULT_STEP};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::Op;

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf treated as constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Back-propagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.id].value;
        if rv.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
        adj[root.id] = Some(Tensor::scalar(1.0));
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            match node.op {
                Op::Leaf => match &mut grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                ref op => op.backward(&nodes, &node.value, &g, &mut adj),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value. Do not hold it across further operations.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

#[cfg(test)]
mod tests;
