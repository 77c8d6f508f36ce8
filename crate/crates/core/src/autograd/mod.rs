//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its output and the information its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only consume earlier nodes.

mod backward;
pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use ops::Unary;
pub(crate) use ops::sigmoid;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MulLeading(Var, Var),
    Unary(Var, Unary),
    ClampMin(Var, T),
    SmoothL1(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: kernels::ConvGeom,
        cout: usize,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: kernels::ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Embedding {
        table: Var,
        ids: Arc<[usize]>,
    },
    BroadcastRows(Var),
    SelectiveScan {
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<T>,
        dims: kernels::ScanDims,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannel(a, b) | MulChannel(a, b) | MulLeading(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Unary(a, _) | ClampMin(a, _) | SmoothL1(a, _) | Sum(a) | Mean(a)
            | SumAxis(a, _) | Reshape(a) | Transpose(a) | Softmax(a) | LogSoftmax(a) | BroadcastRows(a) => {
                vec![*a]
            }
            Conv2d { x, kernel, bias, .. } | Depthwise { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Slice { x, .. } | GatherRows { x, .. } | Gather { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            Embedding { table, .. } => vec![*table],
            SelectiveScan {
                x,
                delta,
                a_log,
                b,
                c,
                d,
                ..
            } => vec![*x, *delta, *a_log, *b, *c, *d],
        }
    }
}

/// Recording of executed operations (the gradient tape).
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Number of operand slots that read `v` (an op using it twice counts twice).
    pub fn uses(&self, v: Var) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&u| u == v).count())
            .sum()
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Records `op` with output `value`; the output needs a gradient iff
    /// any input does.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, requires_grad, op)
    }

    /// Propagates d`loss`/d(node) to every node, returning leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            backward::propagate(&nodes, id, &upstream, &mut grads)?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Grads { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

#[cfg(test)]
mod tests;
