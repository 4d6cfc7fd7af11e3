//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every forward op appends a node holding its
//! output value plus whatever the backward rule needs. Nodes only reference
//! earlier nodes, so walking the list in reverse index order is a valid
//! topological order and each node is visited exactly once per backward call.
//!
//! Backward can be called many times on the same graph (with different roots),
//! which is how per-branch input gradients and per-variant parameter gradients
//! are obtained from a single forward recording.

mod gradcheck;
mod kernels;
mod ops;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Result, Tensor, TensorError};

pub use gradcheck::{check_gradients, relative_error};
pub use params::{Binding, ParamId, ParamStore, Parameter};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTrailing(usize, usize),
    MulTrailing(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, shared_rhs: bool },
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Abs(usize),
    Exp(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    AvgPool { x: usize, kernel: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Dropout { x: usize, mask: Vec<f64> },
    MaskMul { x: usize, mask: Vec<f64> },
    Mse(usize, usize),
    Patch { x: usize, len: usize, stride: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Copies the value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Appends an op result after checking it is finite.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.index(loss)?;
        let root_node = &self.nodes[root];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if root_node.requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            requires: self.nodes[..=root].iter().map(|n| n.requires_grad).collect(),
            shapes: self.nodes[..=root].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Gradient store produced by [`Graph::backward`], keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`.
    ///
    /// `None` for nodes that do not require gradients; zeros for nodes that
    /// require them but are not ancestors of the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        if v.index >= self.requires.len() {
            return None;
        }
        if !self.requires[v.index] {
            return None;
        }
        let shape = self.shapes[v.index].clone();
        let data = match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data).ok()
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph || v.index >= self.grads.len() || !self.requires[v.index] {
            return None;
        }
        self.grads[v.index].as_deref()
    }
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}
