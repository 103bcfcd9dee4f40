//! Reverse-mode gradient tape over a fixed set of tensor primitives.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward simply walks it in reverse. Leaves are
//! either constants or named parameters; only named parameters appear in the
//! returned [`GradientSet`].

use crate::error::{Error, Result};
use crate::params::{GradientSet, NamedTensor};
use crate::stats::{channel_means, compute_stats, whiten};
use crate::tensor::{Matrix, Shape4, Tensor4};

use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Tensor(Tensor4),
    Matrix(Matrix),
    Scalar(f64),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Matrix(_) => "matrix",
            Value::Scalar(_) => "scalar",
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Value::Tensor(t) => t.data(),
            Value::Matrix(m) => m.data(),
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Value::Tensor(t) => t.data_mut(),
            Value::Matrix(m) => m.data_mut(),
            Value::Scalar(s) => std::slice::from_mut(s),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Tensor(t) => Value::Tensor(Tensor4::zeros(t.shape())),
            Value::Matrix(m) => Value::Matrix(Matrix::zeros(m.rows(), m.cols())),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Value {
        match self {
            Value::Tensor(t) => Value::Tensor(Tensor4::from_vec(t.shape(), data).expect("same shape")),
            Value::Matrix(m) => Value::Matrix(Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape")),
            Value::Scalar(_) => Value::Scalar(data[0]),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Value::Tensor(t) => {
                let s = t.shape();
                vec![s.n, s.c, s.h, s.w]
            }
            Value::Matrix(m) => vec![m.rows(), m.cols()],
            Value::Scalar(_) => vec![],
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor4> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Value::Matrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }
}

/// Recorded primitive, with whatever the adjoint needs beyond input values.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: NodeId, kernel: NodeId, bias: NodeId },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    ChannelMean { x: NodeId },
    ChannelStd { x: NodeId, mean: Matrix },
    Whiten { x: NodeId, std: Matrix },
    Affine { x: NodeId, scale: NodeId, bias: NodeId },
    Propagate { p: Matrix, x: NodeId },
    MatMul { a: NodeId, b: NodeId },
    ScaleCols { x: NodeId, d: NodeId },
    Sum { x: NodeId },
    SqDist { a: NodeId, b: NodeId, scale: f64 },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, kernel, bias } => vec![*x, *kernel, *bias],
            Op::Relu { x }
            | Op::AvgPool2 { x }
            | Op::Upsample2 { x }
            | Op::ChannelMean { x }
            | Op::ChannelStd { x, .. }
            | Op::Whiten { x, .. }
            | Op::Propagate { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Affine { x, scale, bias } => vec![*x, *scale, *bias],
            Op::MatMul { a, b } | Op::SqDist { a, b, .. } => vec![*a, *b],
            Op::ScaleCols { x, d } => vec![*x, *d],
            Op::WeightedSum { terms } => terms.iter().map(|(id, _)| *id).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// A single-use recording of one forward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Gradients from one backward pass, plus the order in which nodes were visited.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub grads: GradientSet,
    pub visit_order: Vec<NodeId>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor4 {
        self.value(id).as_tensor().expect("node holds a tensor")
    }

    pub fn matrix(&self, id: NodeId) -> &Matrix {
        self.value(id).as_matrix().expect("node holds a matrix")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).as_scalar().expect("node holds a scalar")
    }

    /// Sign pattern of every rectifier input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Value, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value) -> NodeId {
        self.leaf(value, false)
    }

    pub fn constant_tensor(&mut self, t: Tensor4) -> NodeId {
        self.constant(Value::Tensor(t))
    }

    pub fn constant_matrix(&mut self, m: Matrix) -> NodeId {
        self.constant(Value::Matrix(m))
    }

    /// Registers a trainable leaf. Names must be unique on a tape.
    pub fn param(&mut self, name: impl Into<String>, value: Value) -> Result<NodeId> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        let id = self.leaf(value, true);
        self.params.push((name, id));
        Ok(id)
    }

    fn expect_tensor(&self, id: NodeId, op: &'static str) -> Result<&Tensor4> {
        let v = self.value(id);
        v.as_tensor()
            .ok_or_else(|| Error::shape(op, format!("expected a tensor input, got a {}", v.kind())))
    }

    fn expect_matrix(&self, id: NodeId, op: &'static str) -> Result<&Matrix> {
        let v = self.value(id);
        v.as_matrix()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix input, got a {}", v.kind())))
    }

    /// Convolution; `bias` must be a `1 x C_out` matrix node.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.expect_matrix(bias, "conv2d")?;
        if b.rows() != 1 {
            return Err(Error::shape("conv2d", "bias must be a single row"));
        }
        let out = ops::conv2d(self.expect_tensor(x, "conv2d")?, self.expect_tensor(kernel, "conv2d")?, b.data())?;
        Ok(self.push(Op::Conv { x, kernel, bias }, Value::Tensor(out)))
    }

    /// Rectifier on a tensor or matrix node.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out = match v {
            Value::Scalar(_) => return Err(Error::shape("relu", "scalar input")),
            other => other.with_data(other.data().iter().map(|v| v.max(0.0)).collect()),
        };
        Ok(self.push(Op::Relu { x }, out))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::avg_pool2(self.expect_tensor(x, "avg_pool2")?)?;
        Ok(self.push(Op::AvgPool2 { x }, Value::Tensor(out)))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::upsample2(self.expect_tensor(x, "upsample2")?);
        Ok(self.push(Op::Upsample2 { x }, Value::Tensor(out)))
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let out = channel_means(self.expect_tensor(x, "channel_mean")?);
        Ok(self.push(Op::ChannelMean { x }, Value::Matrix(out)))
    }

    /// Eps-guarded per-plane standard deviation.
    pub fn channel_std(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let st = compute_stats(self.expect_tensor(x, "channel_std")?, eps);
        Ok(self.push(Op::ChannelStd { x, mean: st.mean }, Value::Matrix(st.std)))
    }

    /// Per-plane whitening with the input's own statistics.
    pub fn whiten(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xt = self.expect_tensor(x, "whiten")?;
        let st = compute_stats(xt, eps);
        let z = whiten(xt, &st)?;
        Ok(self.push(Op::Whiten { x, std: st.std }, Value::Tensor(z)))
    }

    /// `x * scale[n, c] + bias[n, c]` per plane.
    pub fn affine(&mut self, x: NodeId, scale: NodeId, bias: NodeId) -> Result<NodeId> {
        let xt = self.expect_tensor(x, "affine")?;
        let out = xt
            .channel_mul(self.expect_matrix(scale, "affine")?)?
            .channel_add(self.expect_matrix(bias, "affine")?)?;
        Ok(self.push(Op::Affine { x, scale, bias }, Value::Tensor(out)))
    }

    /// `p · x` for a constant propagation matrix `p`.
    pub fn propagate(&mut self, p: &Matrix, x: NodeId) -> Result<NodeId> {
        let out = p.matmul(self.expect_matrix(x, "propagate")?)?;
        Ok(self.push(Op::Propagate { p: p.clone(), x }, Value::Matrix(out)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.expect_matrix(a, "matmul")?.matmul(self.expect_matrix(b, "matmul")?)?;
        Ok(self.push(Op::MatMul { a, b }, Value::Matrix(out)))
    }

    /// `x · diag(d)` with `d` a `1 x C` row.
    pub fn scale_cols(&mut self, x: NodeId, d: NodeId) -> Result<NodeId> {
        let xm = self.expect_matrix(x, "scale_cols")?;
        let dm = self.expect_matrix(d, "scale_cols")?;
        if dm.rows() != 1 || dm.cols() != xm.cols() {
            return Err(Error::shape(
                "scale_cols",
                format!("{}x{} scales for {} columns", dm.rows(), dm.cols(), xm.cols()),
            ));
        }
        let mut out = xm.clone();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(dm.data()).for_each(|(v, &k)| *v *= k);
        }
        Ok(self.push(Op::ScaleCols { x, d }, Value::Matrix(out)))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Op::Sum { x }, Value::Scalar(total)))
    }

    /// `scale · ‖a - b‖²` for two nodes of identical shape.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() || va.kind() != vb.kind() {
            return Err(Error::shape(
                "sq_dist",
                format!("{} {:?} vs {} {:?}", va.kind(), va.dims(), vb.kind(), vb.dims()),
            ));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::SqDist { a, b, scale }, Value::Scalar(scale * s)))
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            total += w * v
                .as_scalar()
                .ok_or_else(|| Error::shape("weighted_sum", format!("{} term", v.kind())))?;
        }
        Ok(self.push(Op::WeightedSum { terms: terms.to_vec() }, Value::Scalar(total)))
    }

    /// Propagates `seed · d(loss)` back to every registered parameter and
    /// clears the tape.
    pub fn backward(&mut self, loss: NodeId, seed: f64) -> Result<GradientSet> {
        Ok(self.backward_traced(loss, seed)?.grads)
    }

    pub fn backward_traced(&mut self, loss: NodeId, seed: f64) -> Result<BackwardResult> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.as_scalar().is_none() {
            return Err(Error::State("loss node is not a scalar".into()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let params = std::mem::take(&mut self.params);

        let mut grads: Vec<Option<Value>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Value::Scalar(seed));
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visit_order.push(NodeId(i));
            for (input, contribution) in adjoint(&nodes, node, &g) {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let grads = params
            .into_iter()
            .map(|(name, id)| {
                let value = &nodes[id.0].value;
                let g = grads[id.0].take().unwrap_or_else(|| value.zeros_like());
                NamedTensor::new(name, value.dims(), g.data().to_vec())
            })
            .collect();
        Ok(BackwardResult {
            grads: GradientSet::new(grads),
            visit_order,
        })
    }
}

/// Contributions of `node`'s upstream gradient `g` to each of its inputs.
fn adjoint(nodes: &[Node], node: &Node, g: &Value) -> Vec<(NodeId, Value)> {
    let val = |id: NodeId| &nodes[id.0].value;
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let gt = || g.as_tensor().expect("tensor gradient");
    let gm = || g.as_matrix().expect("matrix gradient");
    let gs = || g.as_scalar().expect("scalar gradient");
    let mut out = Vec::new();

    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, kernel, bias } => {
            let k = val(*kernel).as_tensor().unwrap();
            if wants(*x) {
                out.push((*x, Value::Tensor(ops::conv2d_backward_input(gt(), k))));
            }
            if wants(*kernel) || wants(*bias) {
                let (dk, db) = ops::conv2d_backward_params(gt(), val(*x).as_tensor().unwrap(), k.shape());
                out.push((*kernel, Value::Tensor(dk)));
                let n = db.len();
                out.push((*bias, Value::Matrix(Matrix::from_vec(1, n, db).unwrap())));
            }
        }
        Op::Relu { x } => {
            let xv = val(*x);
            out.push((*x, xv.with_data(ops::relu_backward(g.data(), xv.data()))));
        }
        Op::AvgPool2 { x } => out.push((*x, Value::Tensor(ops::avg_pool2_backward(gt())))),
        Op::Upsample2 { x } => out.push((*x, Value::Tensor(ops::upsample2_backward(gt())))),
        Op::ChannelMean { x } => {
            let shape = val(*x).as_tensor().unwrap().shape();
            out.push((*x, Value::Tensor(ops::channel_mean_backward(gm(), shape))));
        }
        Op::ChannelStd { x, mean } => {
            let std = node.value.as_matrix().unwrap();
            let xt = val(*x).as_tensor().unwrap();
            out.push((*x, Value::Tensor(ops::channel_std_backward(gm(), xt, mean, std))));
        }
        Op::Whiten { x, std } => {
            let z = node.value.as_tensor().unwrap();
            out.push((*x, Value::Tensor(ops::whiten_backward(gt(), z, std))));
        }
        Op::Affine { x, scale, bias } => {
            let g = gt();
            let s: Shape4 = g.shape();
            let sc = val(*scale).as_matrix().unwrap();
            if wants(*x) {
                out.push((*x, Value::Tensor(g.channel_mul(sc).unwrap())));
            }
            if wants(*scale) {
                let xt = val(*x).as_tensor().unwrap();
                let mut ds = Matrix::zeros(s.n, s.c);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let v: f64 = g.plane(n, c).iter().zip(xt.plane(n, c)).map(|(a, b)| a * b).sum();
                        ds.set(n, c, v);
                    }
                }
                out.push((*scale, Value::Matrix(ds)));
            }
            if wants(*bias) {
                let mut db = Matrix::zeros(s.n, s.c);
                for n in 0..s.n {
                    for c in 0..s.c {
                        db.set(n, c, g.plane(n, c).iter().sum());
                    }
                }
                out.push((*bias, Value::Matrix(db)));
            }
        }
        Op::Propagate { p, x } => {
            out.push((*x, Value::Matrix(p.transpose().matmul(gm()).unwrap())));
        }
        Op::MatMul { a, b } => {
            let (am, bm) = (val(*a).as_matrix().unwrap(), val(*b).as_matrix().unwrap());
            if wants(*a) {
                out.push((*a, Value::Matrix(gm().matmul(&bm.transpose()).unwrap())));
            }
            if wants(*b) {
                out.push((*b, Value::Matrix(am.transpose().matmul(gm()).unwrap())));
            }
        }
        Op::ScaleCols { x, d } => {
            let (xm, dm) = (val(*x).as_matrix().unwrap(), val(*d).as_matrix().unwrap());
            let g = gm();
            if wants(*x) {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    dx.row_mut(r).iter_mut().zip(dm.data()).for_each(|(v, &k)| *v *= k);
                }
                out.push((*x, Value::Matrix(dx)));
            }
            if wants(*d) {
                let mut dd = Matrix::zeros(1, xm.cols());
                for r in 0..xm.rows() {
                    for c in 0..xm.cols() {
                        let v = dd.get(0, c) + g.get(r, c) * xm.get(r, c);
                        dd.set(0, c, v);
                    }
                }
                out.push((*d, Value::Matrix(dd)));
            }
        }
        Op::Sum { x } => {
            let xv = val(*x);
            out.push((*x, xv.with_data(vec![gs(); xv.data().len()])));
        }
        Op::SqDist { a, b, scale } => {
            let k = 2.0 * scale * gs();
            let (va, vb) = (val(*a), val(*b));
            let diff: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| k * (x - y)).collect();
            if wants(*b) {
                out.push((*b, vb.with_data(diff.iter().map(|v| -v).collect())));
            }
            if wants(*a) {
                out.push((*a, va.with_data(diff)));
            }
        }
        Op::WeightedSum { terms } => {
            for &(id, w) in terms {
                out.push((id, Value::Scalar(w * gs())));
            }
        }
    }
    out
}
