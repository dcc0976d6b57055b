//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do not
//! depend on a gradient-carrying leaf are never visited by [`Graph::backward`],
//! so frozen weights cost a forward product and nothing more.

mod dense;
mod geom;
mod spatial;

use std::collections::HashMap;

pub use geom::WarpCache;
pub(crate) use spatial::{avg_pool2_values, blur_valid_values};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Abs,
    Recip,
    Sqrt,
    Square,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    MulCols { a: Var, s: Var },
    ColNorms(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Pow(Var, f64),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Transpose(Var),
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Slice { a: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    MaskedMean { a: Var, mask: Vec<bool>, count: usize },
    Conv2d { x: Var, w: Var, b: Var },
    Upsample2(Var),
    AvgPool2(Var),
    BlurValid { x: Var, kernel: Vec<f64> },
    DiffX(Var),
    DiffY(Var),
    ChannelMean(Var),
    Rodrigues(Var),
    Warp { depth: Var, rot: Var, trans: Var, cache: Box<WarpCache> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            AddRow { a, row } => vec![*a, *row],
            MulCols { a, s } => vec![*a, *s],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatCols(vs) => vs.clone(),
            Conv2d { x, w, b } => vec![*x, *w, *b],
            Warp {
                depth, rot, trans, ..
            } => vec![*depth, *rot, *trans],
            ColNorms(a) | Scale(a, _) | AddScalar(a) | Unary(a, _) | Pow(a, _) | ClampMin(a, _)
            | SoftmaxRows(a) | Transpose(a) | Reshape(a) | MeanRows(a) | Sum(a) | Mean(a)
            | Upsample2(a) | AvgPool2(a) | DiffX(a) | DiffY(a) | ChannelMean(a) | Rodrigues(a) => {
                vec![*a]
            }
            SliceCols { a, .. } | Slice { a, .. } | MaskedMean { a, .. } | BlurValid { x: a, .. } => {
                vec![*a]
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that binds every parameter as a constant, for evaluation.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter into this graph, once per graph. Trainable
    /// parameters become gradient-carrying leaves, frozen ones constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable && !self.inference);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound so far, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort();
        out
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { .. }
            | Op::Upsample2(_)
            | Op::AvgPool2(_)
            | Op::BlurValid { .. }
            | Op::DiffX(_)
            | Op::DiffY(_)
            | Op::ChannelMean(_) => self.backprop_spatial(out, g, grads),
            Op::Rodrigues(_) | Op::Warp { .. } => self.backprop_geom(out, g, grads),
            _ => self.backprop_dense(out, g, grads),
        }
    }

    /// Gradient buffer for `v`, created as zeros on first use. `None` when
    /// `v` does not need a gradient.
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }
}
