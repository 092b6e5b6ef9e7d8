//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation in topological order against a
//! borrowed [`ParamStore`]. [`Graph::backward`] walks the tape once in reverse
//! and returns gradients for every parameter and every node.

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters never receive gradients.
    pub frozen: bool,
}

/// Named parameter tensors, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].frozen = true;
        id
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        pad: usize,
        stride: usize,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    /// Multiply channel `k` of an `[H, W, C]` tensor by a constant.
    ChannelScale {
        x: NodeId,
        scale: Vec<f64>,
    },
    /// Elementwise product with a constant tensor.
    MulConst {
        x: NodeId,
        factor: Tensor,
    },
    /// `sigmoid(w) * a + (1 - sigmoid(w)) * b`.
    Mix {
        a: NodeId,
        b: NodeId,
        w: ParamId,
    },
    SquaredError {
        x: NodeId,
        target: Tensor,
    },
    SoftmaxCrossEntropy {
        x: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    NegLogSigmoid(ParamId),
    Sum(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward {}", op_name(&op))));
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn trainable(&self, id: ParamId) -> bool {
        !self.store.get(id).frozen
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input. With `requires_grad` its gradient is reported by backward.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Input, value, requires_grad)
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId, pad: usize, stride: usize) -> Result<NodeId> {
        let out = kernels::conv2d(self.value(x), self.store.value(w), self.store.value(b), pad, stride)?;
        let ng = self.needs(x) || self.trainable(w) || self.trainable(b);
        self.push(Op::Conv2d { x, w, b, pad, stride }, out, ng)
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let out = kernels::linear(self.value(x), self.store.value(w), self.store.value(b))?;
        let ng = self.needs(x) || self.trainable(w) || self.trainable(b);
        self.push(Op::Linear { x, w, b }, out, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::relu(self.value(x));
        let ng = self.needs(x);
        self.push(Op::Relu(x), out, ng)
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2d(self.value(x), k, stride)?;
        let ng = self.needs(x);
        self.push(Op::MaxPool { x, argmax }, out, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(Op::Reshape(x), out, ng)
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    pub fn channel_scale(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 3 || v.shape()[2] != scale.len() {
            return Err(Error::shape(
                "channel_scale",
                format!("{:?} with {} scales", v.shape(), scale.len()),
            ));
        }
        let mut out = v.clone();
        let c = scale.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= scale[i % c];
        }
        let ng = self.needs(x);
        self.push(Op::ChannelScale { x, scale }, out, ng)
    }

    pub fn mul_const(&mut self, x: NodeId, factor: Tensor) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape() != factor.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", v.shape(), factor.shape()),
            ));
        }
        let mut out = v.clone();
        for (o, f) in out.data_mut().iter_mut().zip(factor.data()) {
            *o *= f;
        }
        let ng = self.needs(x);
        self.push(Op::MulConst { x, factor }, out, ng)
    }

    pub fn mix(&mut self, a: NodeId, b: NodeId, w: ParamId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mix", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        if self.store.value(w).len() != 1 {
            return Err(Error::shape("mix", "mixing weight must be a scalar"));
        }
        let p = kernels::sigmoid(self.store.value(w).item());
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| p * x + (1.0 - p) * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b) || self.trainable(w);
        self.push(Op::Mix { a, b, w }, out, ng)
    }

    /// `||x - target||^2` as a scalar node.
    pub fn squared_error(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape() != target.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("{:?} vs {:?}", v.shape(), target.shape()),
            ));
        }
        let s: f64 = v.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ng = self.needs(x);
        self.push(Op::SquaredError { x, target }, Tensor::scalar(s), ng)
    }

    pub fn softmax_cross_entropy(&mut self, x: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 || label >= v.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, label {label}", v.shape()),
            ));
        }
        let probs = kernels::softmax(v.data());
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.data().iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - v.data()[label];
        let ng = self.needs(x);
        self.push(Op::SoftmaxCrossEntropy { x, label, probs }, Tensor::scalar(loss), ng)
    }

    /// `-log(sigmoid(w))` for a scalar parameter.
    pub fn neg_log_sigmoid(&mut self, w: ParamId) -> Result<NodeId> {
        let wv = self.store.value(w);
        if wv.len() != 1 {
            return Err(Error::shape("neg_log_sigmoid", "parameter must be a scalar"));
        }
        let out = Tensor::scalar(kernels::softplus(-wv.item()));
        let ng = self.trainable(w);
        self.push(Op::NegLogSigmoid(w), out, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, c) in &terms {
            if self.value(id).len() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            s += c * self.value(id).item();
        }
        let ng = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(Op::WeightedSum(terms), Tensor::scalar(s), ng)
    }

    /// Gradients of the scalar `seed` node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        self.backward_with(Some(seed), Vec::new())
    }

    /// Backward pass seeded by an optional scalar node plus externally supplied
    /// gradients for arbitrary nodes (used for batch-level losses whose
    /// gradient with respect to a node is computed outside the tape).
    pub fn backward_with(&self, seed: Option<NodeId>, extra: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        if let Some(s) = seed {
            if self.value(s).len() != 1 {
                return Err(Error::shape(
                    "backward",
                    format!("seed node must be scalar, got {:?}", self.value(s).shape()),
                ));
            }
            grads[s.0] = Some(Tensor::full(self.value(s).shape(), 1.0));
        }
        for (id, g) in extra {
            if g.shape() != self.value(id).shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "injected gradient {:?} for node {:?}",
                        g.shape(),
                        self.value(id).shape()
                    ),
                ));
            }
            accumulate(&mut grads[id.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.backward_node(node, &g, &mut grads, &mut pgrads);
        }
        for g in grads.iter().chain(pgrads.iter()).flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], pgrads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input => {}
            Op::Conv2d { x, w, b, pad, stride } => {
                let need_dw = self.trainable(*w) || self.trainable(*b);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.store.value(*w),
                    g,
                    *pad,
                    *stride,
                    self.needs(*x),
                    need_dw,
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.trainable(*w) {
                    accumulate(&mut pgrads[w.0], dw.expect("dw"));
                }
                if self.trainable(*b) {
                    accumulate(&mut pgrads[b.0], db.expect("db"));
                }
            }
            Op::Linear { x, w, b } => {
                let need_dw = self.trainable(*w) || self.trainable(*b);
                let (dx, dw, db) =
                    kernels::linear_backward(self.value(*x), self.store.value(*w), g, self.needs(*x), need_dw);
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.trainable(*w) {
                    accumulate(&mut pgrads[w.0], dw.expect("dw"));
                }
                if self.trainable(*b) {
                    accumulate(&mut pgrads[b.0], db.expect("db"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data).expect("relu"));
            }
            Op::MaxPool { x, argmax } => {
                let dx = kernels::maxpool2d_backward(self.value(*x).shape(), argmax, g);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], g.clone().reshape(&shape).expect("reshape"));
            }
            Op::ChannelScale { x, scale } => {
                let mut dx = g.clone();
                let c = scale.len();
                for (i, d) in dx.data_mut().iter_mut().enumerate() {
                    *d *= scale[i % c];
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MulConst { x, factor } => {
                let mut dx = g.clone();
                for (d, f) in dx.data_mut().iter_mut().zip(factor.data()) {
                    *d *= f;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Mix { a, b, w } => {
                let p = kernels::sigmoid(self.store.value(*w).item());
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.scale(p));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.scale(1.0 - p));
                }
                if self.trainable(*w) {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let s: f64 = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(gv, (x, y))| gv * (x - y))
                        .sum();
                    accumulate(&mut pgrads[w.0], Tensor::scalar(s * p * (1.0 - p)));
                }
            }
            Op::SquaredError { x, target } => {
                let c = 2.0 * g.item();
                let xv = self.value(*x);
                let data = xv.data().iter().zip(target.data()).map(|(a, b)| c * (a - b)).collect();
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data).expect("se"));
            }
            Op::SoftmaxCrossEntropy { x, label, probs } => {
                let c = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| c * p).collect();
                d[*label] -= c;
                accumulate(&mut grads[x.0], Tensor::from_vec(d));
            }
            Op::NegLogSigmoid(w) => {
                let p = kernels::sigmoid(self.store.value(*w).item());
                accumulate(&mut pgrads[w.0], Tensor::scalar(-(1.0 - p) * g.item()));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], Tensor::full(&shape, g.item()));
            }
            Op::WeightedSum(terms) => {
                for &(id, c) in terms {
                    if self.needs(id) {
                        accumulate(&mut grads[id.0], Tensor::scalar(c * g.item()));
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::Relu(_) => "relu",
        Op::MaxPool { .. } => "maxpool2d",
        Op::Reshape(_) => "reshape",
        Op::ChannelScale { .. } => "channel_scale",
        Op::MulConst { .. } => "mul_const",
        Op::Mix { .. } => "mix",
        Op::SquaredError { .. } => "squared_error",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::NegLogSigmoid(_) => "neg_log_sigmoid",
        Op::Sum(_) => "sum",
        Op::WeightedSum(_) => "weighted_sum",
    }
}
