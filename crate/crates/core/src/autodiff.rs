//! Tape-based reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself expressed with tape operations, so
//! a backward pass run with `create_graph = true` leaves behind gradient nodes
//! that can be differentiated again. The gradient-matching loss relies on
//! this: it penalises an input gradient and needs that penalty's gradient
//! with respect to the student parameters.
//!
//! Max-style routing (pooling, maxout, label selection) is recorded as a
//! [`Op::Gather`] with a frozen index map; its adjoint is a scatter-add with
//! the same map, so second-order passes treat the routing as constant.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize, Vec<usize>),
    Conv { x: usize, w: usize, pad: usize },
    ConvInputGrad { gy: usize, w: usize, pad: usize, height: usize, width: usize },
    ConvWeightGrad { x: usize, gy: usize, pad: usize, kernel: (usize, usize) },
    Gather { x: usize, index: Arc<[usize]>, shape: Vec<usize> },
    ScatterAdd { x: usize, index: Arc<[usize]>, shape: Vec<usize> },
    /// `b[C]` broadcast over axis 1 of the target shape.
    BroadcastChannels(usize, Vec<usize>),
    /// Sum over every axis except axis 1.
    SumChannels(usize),
    /// `[N×k] → [N]`.
    RowSum(usize),
    /// `[N] → [N×k]`.
    RowBroadcast(usize, usize),
    Sum(usize),
    Broadcast(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::BroadcastChannels(..) => "broadcast_channels",
            Op::SumChannels(_) => "sum_channels",
            Op::RowSum(_) => "row_sum",
            Op::RowBroadcast(..) => "row_broadcast",
            Op::Sum(_) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    pub fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvInputGrad { gy, w, .. } => vec![gy, w],
            Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Gather { x: a, .. }
            | Op::ScatterAdd { x: a, .. }
            | Op::BroadcastChannels(a, _)
            | Op::SumChannels(a)
            | Op::RowSum(a)
            | Op::RowBroadcast(a, _)
            | Op::Sum(a)
            | Op::Broadcast(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a computation. Parents always precede children.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn row_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::shape(op, format!("expected [N×k], got {s:?}"))),
    }
}

/// Row-wise softmax of `[N×k]`, max-shifted.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (n, k) = row_dims(a, "softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in a.data().chunks(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    let out = Tensor::from_parts(vec![n, k], out);
    out.check_finite("softmax")?;
    Ok(out)
}

pub fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (n, k) = row_dims(a, "log_softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in a.data().chunks(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    let out = Tensor::from_parts(vec![n, k], out);
    out.check_finite("log_softmax")?;
    Ok(out)
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need rank ≥ 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Computes a node value from its parents' values.
fn eval<'a>(op: &Op, v: &dyn Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => v(*a).add(v(*b))?,
        Op::Sub(a, b) => v(*a).sub(v(*b))?,
        Op::Mul(a, b) => v(*a).mul(v(*b))?,
        Op::Div(a, b) => v(*a).zip_map(v(*b), "div", |x, y| x / y)?,
        Op::Scale(a, c) => v(*a).scale(*c)?,
        Op::Offset(a, c) => v(*a).map("offset", |x| x + c)?,
        Op::Exp(a) => v(*a).map("exp", f64::exp)?,
        Op::Ln(a) => v(*a).map("ln", f64::ln)?,
        Op::Relu(a) => v(*a).map("relu", |x| x.max(0.0))?,
        Op::MatMul(a, b) => tensor::matmul(v(*a), v(*b))?,
        Op::Transpose(a) => tensor::transpose(v(*a))?,
        Op::Reshape(a, shape) => v(*a).reshape(shape.clone())?,
        Op::Conv { x, w, pad } => tensor::conv2d_batch(v(*x), v(*w), *pad)?,
        Op::ConvInputGrad { gy, w, pad, height, width } => {
            tensor::conv2d_input_grad(v(*gy), v(*w), *pad, *height, *width)?
        }
        Op::ConvWeightGrad { x, gy, pad, kernel } => {
            tensor::conv2d_weight_grad(v(*x), v(*gy), *pad, kernel.0, kernel.1)?
        }
        Op::Gather { x, index, shape } => tensor::gather(v(*x), index, shape.clone())?,
        Op::ScatterAdd { x, index, shape } => tensor::scatter_add(v(*x), index, shape.clone())?,
        Op::BroadcastChannels(b, shape) => {
            let b = v(*b);
            let (n, c, inner) = channel_layout(shape, "broadcast_channels")?;
            if b.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_channels",
                    lhs: b.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            let mut data = Vec::with_capacity(n * c * inner);
            for _ in 0..n {
                for &bv in b.data() {
                    data.extend(std::iter::repeat_n(bv, inner));
                }
            }
            Tensor::from_parts(shape.clone(), data)
        }
        Op::SumChannels(x) => {
            let x = v(*x);
            let (n, c, inner) = channel_layout(x.shape(), "sum_channels")?;
            let mut data = vec![0.0; c];
            for i in 0..n {
                for (ch, acc) in data.iter_mut().enumerate() {
                    let base = (i * c + ch) * inner;
                    *acc += x.data()[base..base + inner].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![c], data)
        }
        Op::RowSum(x) => {
            let x = v(*x);
            let (n, k) = row_dims(x, "row_sum")?;
            Tensor::from_parts(vec![n], x.data().chunks(k).map(|r| r.iter().sum()).collect())
        }
        Op::RowBroadcast(x, k) => {
            let x = v(*x);
            if x.rank() != 1 {
                return Err(Error::shape("row_broadcast", format!("expected [N], got {:?}", x.shape())));
            }
            let n = x.len();
            let data = x.data().iter().flat_map(|&r| std::iter::repeat_n(r, *k)).collect();
            Tensor::from_parts(vec![n, *k], data)
        }
        Op::Sum(x) => Tensor::scalar(v(*x).data().iter().sum()),
        Op::Broadcast(x, shape) => Tensor::full(shape.clone(), v(*x).item()?),
        Op::Softmax(a) => softmax_rows(v(*a))?,
        Op::LogSoftmax(a) => log_softmax_rows(v(*a))?,
    };
    out.check_finite(op.name())?;
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        Ok(v.index)
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// A trainable leaf (parameters, inputs being differentiated).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, &|i| &nodes[i].value)?
        };
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(self.idx(a)?, self.idx(b)?);
        self.push(op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(self.idx(a)?, self.idx(b)?);
        self.push(op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(self.idx(a)?, self.idx(b)?);
        self.push(op)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Div(self.idx(a)?, self.idx(b)?);
        self.push(op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let op = Op::Scale(self.idx(a)?, c);
        self.push(op)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let op = Op::Offset(self.idx(a)?, c);
        self.push(op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let op = Op::Exp(self.idx(a)?);
        self.push(op)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let op = Op::Ln(self.idx(a)?);
        self.push(op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let op = Op::Relu(self.idx(a)?);
        self.push(op)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::MatMul(self.idx(a)?, self.idx(b)?);
        self.push(op)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let op = Op::Transpose(self.idx(a)?);
        self.push(op)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let op = Op::Reshape(self.idx(a)?, shape.into());
        self.push(op)
    }

    /// Batched zero-padded cross-correlation `x[N×C×H×W] ⋆ w[O×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let op = Op::Conv {
            x: self.idx(x)?,
            w: self.idx(w)?,
            pad,
        };
        self.push(op)
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, pad: usize, height: usize, width: usize) -> Result<Var> {
        let op = Op::ConvInputGrad {
            gy: self.idx(gy)?,
            w: self.idx(w)?,
            pad,
            height,
            width,
        };
        self.push(op)
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, pad: usize, kernel: (usize, usize)) -> Result<Var> {
        let op = Op::ConvWeightGrad {
            x: self.idx(x)?,
            gy: self.idx(gy)?,
            pad,
            kernel,
        };
        self.push(op)
    }

    /// `out[k] = x[index[k]]`, `out` taking `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let op = Op::Gather {
            x: self.idx(x)?,
            index,
            shape,
        };
        self.push(op)
    }

    pub fn scatter_add(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let op = Op::ScatterAdd {
            x: self.idx(x)?,
            index,
            shape,
        };
        self.push(op)
    }

    /// Max pooling over `[N×C×H×W]`; the argmax map is frozen into the node.
    pub fn max_pool(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (shape, index) = tensor::max_pool_indices(self.value(x), window, stride)?;
        self.gather(x, index.into(), shape)
    }

    /// Maxout over axis 1 of `[N × G·P × …]`, pieces of a unit contiguous.
    pub fn maxout(&mut self, x: Var, pieces: usize) -> Result<Var> {
        if pieces == 0 {
            return Err(Error::invalid("maxout needs at least one piece"));
        }
        let shape = self.shape(x).to_vec();
        let (n, channels, inner) = channel_layout(&shape, "maxout")?;
        if channels % pieces != 0 {
            return Err(Error::shape(
                "maxout",
                format!("{channels} channels not divisible into {pieces} pieces"),
            ));
        }
        let groups = channels / pieces;
        let index = tensor::group_max_indices(self.value(x), n, groups, pieces, inner);
        let mut out_shape = shape;
        out_shape[1] = groups;
        self.gather(x, index.into(), out_shape)
    }

    /// Adds `bias[C]` along axis 1 of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let op = Op::BroadcastChannels(self.idx(bias)?, shape);
        let b = self.push(op)?;
        self.add(x, b)
    }

    fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let op = Op::SumChannels(self.idx(x)?);
        self.push(op)
    }

    fn broadcast_channels(&mut self, b: Var, shape: Vec<usize>) -> Result<Var> {
        let op = Op::BroadcastChannels(self.idx(b)?, shape);
        self.push(op)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let op = Op::RowSum(self.idx(x)?);
        self.push(op)
    }

    pub fn row_broadcast(&mut self, x: Var, k: usize) -> Result<Var> {
        let op = Op::RowBroadcast(self.idx(x)?, k);
        self.push(op)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let op = Op::Sum(self.idx(x)?);
        self.push(op)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let op = Op::Broadcast(self.idx(x)?, shape);
        self.push(op)
    }

    /// Row-wise softmax of `[N×k]`, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let op = Op::Softmax(self.idx(a)?);
        self.push(op)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let op = Op::LogSoftmax(self.idx(a)?);
        self.push(op)
    }

    /// Picks `x[n, labels[n]]` from `[N×k]`, giving `[N]`.
    pub fn select_labels(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = row_dims(self.value(x), "select_labels")?;
        if labels.len() != n {
            return Err(Error::shape("select_labels", format!("{} labels for {n} rows", labels.len())));
        }
        let mut index = Vec::with_capacity(n);
        for (row, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            index.push(row * k + y);
        }
        self.gather(x, index.into(), vec![n])
    }

    /// Reverse-mode gradients of a single-element `root` with respect to each
    /// of `wrt`. With `create_graph` the returned nodes remain connected to
    /// the graph and can be differentiated again; otherwise they are fresh
    /// constant leaves.
    ///
    /// Contributions are accumulated in reverse tape order, so results are
    /// deterministic.
    pub fn backward(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let root_i = self.idx(root)?;
        if self.nodes[root_i].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root_i].value.shape().to_vec()));
        }
        let wrt_idx = wrt.iter().map(|&w| self.idx(w)).collect::<Result<Vec<_>>>()?;

        // Nodes that depend on some target; only these receive gradients.
        let mut on_path = vec![false; root_i + 1];
        for &w in &wrt_idx {
            if w <= root_i {
                on_path[w] = true;
            }
        }
        for i in 0..=root_i {
            if !on_path[i] && self.nodes[i].op.parents().iter().any(|&p| on_path[p]) {
                on_path[i] = true;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; root_i + 1];
        if on_path[root_i] {
            let seed = Tensor::ones(self.nodes[root_i].value.shape().to_vec());
            grads[root_i] = Some(self.constant(seed));
        }
        for i in (0..=root_i).rev() {
            let Some(g) = grads[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(i, &op, g, &on_path)? {
                grads[parent] = Some(match grads[parent] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt_idx
            .iter()
            .map(|&w| {
                let grad = if w <= root_i { grads[w] } else { None };
                match grad {
                    Some(g) if create_graph => Ok(g),
                    Some(g) => {
                        let v = self.nodes[g.index].value.clone();
                        Ok(self.constant(v))
                    }
                    None => {
                        let shape = self.nodes[w].value.shape().to_vec();
                        Ok(self.constant(Tensor::zeros(shape)))
                    }
                }
            })
            .collect()
    }

    /// Parent contributions of node `i` given its upstream gradient `g`.
    fn vjp(&mut self, i: usize, op: &Op, g: Var, on_path: &[bool]) -> Result<Vec<(usize, Var)>> {
        let out = self.var(i);
        let v = |tape: &Tape, j: usize| tape.var(j);
        let mut res = Vec::with_capacity(2);
        let want = |j: usize| on_path[j];
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    res.push((a, self.mul(g, v(self, b))?));
                }
                if want(b) {
                    res.push((b, self.mul(g, v(self, a))?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    res.push((a, self.div(g, v(self, b))?));
                }
                if want(b) {
                    let go = self.mul(g, out)?;
                    let t = self.div(go, v(self, b))?;
                    res.push((b, self.neg(t)?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    res.push((a, self.scale(g, c)?));
                }
            }
            Op::Offset(a, _) => {
                if want(a) {
                    res.push((a, g));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    res.push((a, self.mul(g, out)?));
                }
            }
            Op::Ln(a) => {
                if want(a) {
                    res.push((a, self.div(g, v(self, a))?));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let mask = self.nodes[a].value.map("relu", |x| if x > 0.0 { 1.0 } else { 0.0 })?;
                    let m = self.constant(mask);
                    res.push((a, self.mul(g, m)?));
                }
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(v(self, b))?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(v(self, a))?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if want(a) {
                    res.push((a, self.transpose(g)?));
                }
            }
            Op::Reshape(a, _) => {
                if want(a) {
                    let shape = self.nodes[a].value.shape().to_vec();
                    res.push((a, self.reshape(g, shape)?));
                }
            }
            Op::Conv { x, w, pad } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let ws = self.nodes[w].value.shape().to_vec();
                if want(x) {
                    res.push((x, self.conv_input_grad(g, v(self, w), pad, xs[2], xs[3])?));
                }
                if want(w) {
                    res.push((w, self.conv_weight_grad(v(self, x), g, pad, (ws[2], ws[3]))?));
                }
            }
            Op::ConvInputGrad { gy, w, pad, .. } => {
                let ws = self.nodes[w].value.shape().to_vec();
                if want(gy) {
                    res.push((gy, self.conv2d(g, v(self, w), pad)?));
                }
                if want(w) {
                    res.push((w, self.conv_weight_grad(g, v(self, gy), pad, (ws[2], ws[3]))?));
                }
            }
            Op::ConvWeightGrad { x, gy, pad, .. } => {
                let xs = self.nodes[x].value.shape().to_vec();
                if want(x) {
                    res.push((x, self.conv_input_grad(v(self, gy), g, pad, xs[2], xs[3])?));
                }
                if want(gy) {
                    res.push((gy, self.conv2d(v(self, x), g, pad)?));
                }
            }
            Op::Gather { x, ref index, .. } => {
                if want(x) {
                    let shape = self.nodes[x].value.shape().to_vec();
                    res.push((x, self.scatter_add(g, index.clone(), shape)?));
                }
            }
            Op::ScatterAdd { x, ref index, .. } => {
                if want(x) {
                    let shape = self.nodes[x].value.shape().to_vec();
                    res.push((x, self.gather(g, index.clone(), shape)?));
                }
            }
            Op::BroadcastChannels(b, _) => {
                if want(b) {
                    res.push((b, self.sum_channels(g)?));
                }
            }
            Op::SumChannels(x) => {
                if want(x) {
                    let shape = self.nodes[x].value.shape().to_vec();
                    res.push((x, self.broadcast_channels(g, shape)?));
                }
            }
            Op::RowSum(x) => {
                if want(x) {
                    let k = self.nodes[x].value.shape()[1];
                    res.push((x, self.row_broadcast(g, k)?));
                }
            }
            Op::RowBroadcast(x, _) => {
                if want(x) {
                    res.push((x, self.row_sum(g)?));
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    let shape = self.nodes[x].value.shape().to_vec();
                    res.push((x, self.broadcast(g, shape)?));
                }
            }
            Op::Broadcast(x, _) => {
                if want(x) {
                    res.push((x, self.sum(g)?));
                }
            }
            Op::Softmax(a) => {
                // y ⊙ (g − Σ_j g_j y_j)
                if want(a) {
                    let k = self.nodes[a].value.shape()[1];
                    let gy = self.mul(g, out)?;
                    let s = self.row_sum(gy)?;
                    let sb = self.row_broadcast(s, k)?;
                    let d = self.sub(g, sb)?;
                    res.push((a, self.mul(out, d)?));
                }
            }
            Op::LogSoftmax(a) => {
                // g − softmax(a) ⊙ Σ_j g_j
                if want(a) {
                    let k = self.nodes[a].value.shape()[1];
                    let p = self.exp(out)?;
                    let s = self.row_sum(g)?;
                    let sb = self.row_broadcast(s, k)?;
                    let ps = self.mul(p, sb)?;
                    res.push((a, self.sub(g, ps)?));
                }
            }
        }
        Ok(res)
    }

    /// Recomputes every node from the leaves using the recorded ops.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, &|i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }
}

/// Central finite-difference gradient of a scalar function of a tensor.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` used by gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / a.norm(2.0).max(b.norm(2.0)).max(floor)
}

/// Outcome of comparing a create-graph second-order gradient with finite
/// differences of the analytic first-order gradient.
#[derive(Clone, Debug)]
pub struct SecondOrderReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `∂/∂θ ‖∂f/∂x‖²` obtained by double backward against central
/// differences (in `θ`) of the first-order gradient norm. `f` must build a
/// single-element node from `(x, θ)` leaves on the supplied tape.
pub fn grad_of_grad_check(
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    x: &Tensor,
    theta: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<SecondOrderReport> {
    let grad_norm = |theta: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let tv = tape.param(theta.clone());
        let out = f(&mut tape, xv, tv)?;
        let gx = tape.backward(out, &[xv], false)?[0];
        Ok(tape.value(gx).data().iter().map(|v| v * v).sum())
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let tv = tape.param(theta.clone());
    let out = f(&mut tape, xv, tv)?;
    let gx = tape.backward(out, &[xv], true)?[0];
    let sq = tape.square(gx)?;
    let norm = tape.sum(sq)?;
    let gt = tape.backward(norm, &[tv], false)?[0];
    let analytic = tape.value(gt).clone();

    let numeric = numeric_gradient(theta, step, grad_norm)?;
    let err = relative_error(&analytic, &numeric, 1e-8);
    Ok(SecondOrderReport {
        passed: err < tolerance,
        analytic,
        numeric,
        relative_error: err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 9.0);

        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.offset(x, 1.0).unwrap();
        let b = tape.offset(x, -1.0).unwrap();
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 3.0);
    }

    #[test]
    fn first_derivatives() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y, &[x], false).unwrap()[0];
        assert_eq!(tape.value(g).item().unwrap(), 6.0);

        let c = tape.constant(Tensor::scalar(5.0));
        let x2 = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let g = tape.backward(c, &[x2], false).unwrap()[0];
        assert_eq!(tape.value(g), &Tensor::zeros([2]));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x, &[x], false), Err(Error::NonScalarRoot(_))));

        let mut other = Tape::new();
        let foreign = other.param(Tensor::scalar(1.0));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s, &[foreign], false), Err(Error::DetachedNode)));
    }

    #[test]
    fn linearity_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = random(&[2, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(xv.clone());
            let e = tape.exp(x).unwrap();
            let f = tape.sum(e).unwrap();
            let sm = tape.softmax(x).unwrap();
            let sq = tape.square(sm).unwrap();
            let gsum = tape.sum(sq).unwrap();
            let root = match which {
                0 => f,
                1 => gsum,
                _ => {
                    let fa = tape.scale(f, a).unwrap();
                    let gb = tape.scale(gsum, b).unwrap();
                    tape.add(fa, gb).unwrap()
                }
            };
            let g = tape.backward(root, &[x], false).unwrap()[0];
            tape.value(g).clone()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gf.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let x = tape.param(random(&[2, 1, 4, 4], &mut rng));
        let w = tape.param(random(&[4, 1, 3, 3], &mut rng));
        let y = tape.conv2d(x, w, 1).unwrap();
        let m = tape.maxout(y, 2).unwrap();
        let p = tape.max_pool(m, (2, 2), (2, 2)).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s, &[w], true).unwrap();
        let replayed = tape.replay().unwrap();
        for (node, v) in tape.nodes().iter().zip(&replayed) {
            assert_eq!(&node.value, v);
        }
    }

    #[test]
    fn max_routing_sends_gradient_to_winners_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv = random(&[1, 4, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let x = tape.param(xv.clone());
        let m = tape.maxout(x, 2).unwrap();
        let p = tape.max_pool(m, (2, 2), (2, 2)).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s, &[x], false).unwrap()[0];

        // indicator oracle: a cell gets 1 iff it is the max of its 2-piece
        // group and that group value is the max of its 2x2 window
        let at = |c: usize, i: usize, j: usize| xv.data()[(c * 4 + i) * 4 + j];
        let mut expect = vec![0.0; 64];
        for grp in 0..2 {
            for bi in 0..2 {
                for bj in 0..2 {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for a in 0..2 {
                        for b in 0..2 {
                            let (i, j) = (2 * bi + a, 2 * bj + b);
                            let (c0, c1) = (2 * grp, 2 * grp + 1);
                            let c = if at(c1, i, j) > at(c0, i, j) { c1 } else { c0 };
                            if at(c, i, j) > best.0 {
                                best = (at(c, i, j), (c * 4 + i) * 4 + j);
                            }
                        }
                    }
                    expect[best.1] = 1.0;
                }
            }
        }
        assert_eq!(tape.value(g).data(), &expect[..]);
    }

    #[test]
    fn second_order_closed_form_bilinear() {
        // f = θ·x: ∂f/∂x = θ, so ∂/∂θ ‖θ‖² = 2θ
        let theta = Tensor::from_vec(vec![0.5, -1.5, 2.0]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap();
        let report = grad_of_grad_check(
            |tape, x, t| {
                let p = tape.mul(x, t)?;
                tape.sum(p)
            },
            &x,
            &theta,
            1e-5,
            1e-6,
        )
        .unwrap();
        for (a, t) in report.analytic.data().iter().zip(theta.data()) {
            assert!((a - 2.0 * t).abs() < 1e-12);
        }
        assert!(report.passed);
    }

    #[test]
    fn second_order_zero_when_independent_of_x() {
        let theta = Tensor::from_vec(vec![0.3, 0.4]).unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0]).unwrap();
        let report = grad_of_grad_check(
            |tape, _x, t| {
                let e = tape.exp(t)?;
                tape.sum(e)
            },
            &x,
            &theta,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.analytic.data().iter().all(|&v| v == 0.0));
    }
}
