//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Inputs
//! always precede their consumers, so walking the tape backwards is a reverse
//! topological order and each node is visited exactly once.

mod backward;
pub mod gradcheck;
pub mod kernels;
mod ops;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use gradcheck::{gradient_check, gradient_check_many, GradCheckReport, Selection};
pub use kernels::ConvGeometry;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    MeanAxis(Var, usize),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, filters: usize },
    EmbeddingLookup { table: Var, indices: Vec<usize> },
    Pick { x: Var, indices: Vec<usize> },
    GridSample { image: Var, centers: Var, k: usize },
}

/// Operation tag of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Reshape,
    Permute,
    Broadcast,
    Concat,
    Slice,
    Sum,
    SumAxis,
    Mean,
    MeanAxis,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    L2Normalize,
    LayerNorm,
    Conv2d,
    EmbeddingLookup,
    Pick,
    GridSample,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::Pick { .. } => OpKind::Pick,
            Op::GridSample { .. } => OpKind::GridSample,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Broadcast(x)
            | Op::Sum(x)
            | Op::SumAxis(x, _)
            | Op::Mean(x)
            | Op::MeanAxis(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x) => vec![*x],
            Op::Slice { x, .. } | Op::L2Normalize { x, .. } | Op::Pick { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::EmbeddingLookup { table, .. } => vec![*table],
            Op::GridSample { image, centers, .. } => vec![*image, *centers],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Recording of a computation, holding every intermediate value.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Predecessors of a node in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Accumulated gradient of `v`, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?} requires a seed gradient",
                self.shape(root)
            )));
        }
        self.backward_with_seed(root, Tensor::ones(&[1]))
    }

    /// Back-propagates an explicit seed gradient from `root`.
    ///
    /// Leaf gradients accumulate across calls; interior gradients are
    /// recomputed for each pass.
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(crate::error::dim_err("backward", self.shape(root), seed.shape()));
        }
        for n in self.nodes.iter_mut() {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.accumulate(root, seed.into_data());
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, dv);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => node.grad = Some(g),
        }
    }
}
