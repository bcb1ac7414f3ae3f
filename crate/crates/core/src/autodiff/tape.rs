use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sigmoid,
    Softplus,
}

pub(crate) enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    pub(crate) fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    AddBiasMid { x: Var, b: Var, batch: usize, rows: usize, cols: usize },
    Scale { x: Var, s: f64 },
    AddConst { x: Var },
    Unary { x: Var, kind: UnaryKind },
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, n: usize },
    Sum { x: Var },
    Reshape { x: Var },
    Transpose01 { x: Var, a: usize, b: usize, c: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { x: Var, start: usize, end: usize, width: usize },
    GatherRows { x: Var, idx: Vec<usize>, width: usize },
    Bilinear { maps: Vec<Var>, coords: Var, sel: Vec<Option<usize>>, chan: Vec<usize>, width: usize, scale: f64 },
    Project { points: Var, cams: Vec<CameraModel>, sel: Vec<Option<usize>> },
    Anchors { boxes: Var, corners: bool },
    PairDist { boxes: Var },
    Focal { logits: Var, targets: Vec<f64>, gamma: f64, alpha: Option<f64> },
}

pub(crate) struct Node {
    pub(crate) value: Value,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Dynamic tape; see the module docs.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
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
        self.push_node(Value::Owned(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf backed by a shared tensor; avoids copying large parameters or
    /// feature maps onto every tape.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_node(Value::Shared(value), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push_node(&mut self, value: Value, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Value::Owned(value), requires_grad, op))
    }

    /// Reverse sweep from a scalar output. Gradients of intermediate nodes
    /// are released once consumed; leaf gradients stay readable.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::dim(format!("backward needs a scalar output, got shape {:?}", self.shape(output))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            super::ops::backward_node(&self.nodes, i, &g, &mut self.grads);
        }
        Ok(())
    }
}

/// Get (allocating on first touch) the gradient buffer of `v`, or `None`
/// when `v` does not require a gradient.
pub(crate) fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.get().numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}
