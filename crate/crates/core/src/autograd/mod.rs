//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs already exist,
//! so node order is a topological order and [`Graph::backward`] can sweep it
//! once in reverse. Leaves that require gradients accumulate into their `grad`
//! slot across backward calls until [`Graph::zero_grad`] is called.

pub mod kernels;
mod ops;

use crate::error::{Error, Result};

pub use ops::AttentionSpec;

/// Dense row-major array. A scalar has an empty shape and one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows and columns when viewed as a matrix: the last axis is the column
    /// axis and every leading axis folds into rows.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [lead @ .., last] => (lead.iter().product(), *last),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: ops::Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of recorded operations for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    degenerate_correlations: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, ops::Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of correlation columns that had zero variance and were reported
    /// as 0 instead of NaN.
    pub fn degenerate_correlations(&self) -> usize {
        self.degenerate_correlations
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Backpropagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        upstream[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(grad) = upstream[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, ops::Op::Leaf) {
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => *slot = Some(grad),
                }
                continue;
            }
            for (input, contribution) in self.input_grads(id, &grad) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut upstream[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, ops::Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: ops::Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}

#[cfg(test)]
mod tests;
