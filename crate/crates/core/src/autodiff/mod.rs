//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs were
//! appended before it, so reverse iteration is a valid topological order.
//! Graphs are built per example and discarded afterwards.

mod check;
mod ops;
mod tensor;

use std::sync::Arc;

pub use check::{grad_check, GRAD_CHECK_STEP};
pub use ops::cosine;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k]x[k,n]`, `[m,k]x[k]` or `[k]x[k,n]`.
    MatMul,
    /// Elementwise sum; the second operand may broadcast over leading axes or be a scalar.
    Add,
    /// Elementwise product; either operand may be a scalar.
    Mul,
    Tanh,
    Sigmoid,
    /// Concatenation along the last axis.
    Concat,
    /// Stacks equal-length vectors into a matrix.
    Stack,
    /// Softmax along the last axis.
    Softmax,
    Log,
    /// `max(x, floor)`; gradient passes only where `x >= floor`.
    ClampMin(f64),
    Sum,
    Mean,
    Scale(f64),
    /// Range `[start, start + len)` of the last axis.
    Slice { start: usize, len: usize },
    /// Selection along the first axis.
    IndexSelect(Vec<usize>),
    Reshape(Vec<usize>),
    /// Cosine similarity of two equal-length non-zero vectors.
    Cosine,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat",
            OpKind::Stack => "stack",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Slice { .. } => "slice",
            OpKind::IndexSelect(_) => "index_select",
            OpKind::Reshape(_) => "reshape",
            OpKind::Cosine => "cosine",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    // `None` marks a leaf.
    op: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf that shares its storage with the caller (parameters, frozen embeddings).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, None, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Arc<Tensor>, op: Option<OpKind>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the node.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let out = ops::forward(&op, &values)?;
        if cfg!(debug_assertions) && !out.is_finite() && values.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Arc::new(out), Some(op), inputs.to_vec(), requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        self.apply(OpKind::Stack, rows)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(OpKind::ClampMin(floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }

    pub fn index_select(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::IndexSelect(indices), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[a])
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        let picked = self.index_select(a, vec![i])?;
        self.reshape(picked, vec![cols])
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Cosine, &[a, b])
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    ///
    /// Intermediate gradients are released as soon as they are propagated;
    /// only leaf gradients remain readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads[loss.0], &[1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let contributions = ops::backward(op, &inputs, &node.value, &upstream, &wanted);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    accumulate(&mut self.grads[input.0], &c);
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` for frozen leaves
    /// and for leaves the loss does not depend on.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}
