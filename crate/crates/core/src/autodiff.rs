//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so node indices
//! are already a topological order and `backward` is a single reverse sweep.
//! The engine is first order only; Hessian-vector products come from
//! central differences of gradients (see [`hvp`]).

use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvGeom, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Reshape(Var),
    Powf(Var, f64),
    Abs(Var),
    Ln(Var),
    Exp(Var),
    Softplus(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Tensor },
    KlDiv { p: Var, q: Var },
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddRow(..) => "add_row",
            Op::AddChannel(..) => "add_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Powf(..) => "powf",
            Op::Abs(..) => "abs",
            Op::Ln(..) => "ln",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` if `leaf` is not a differentiable leaf.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out of the map, panicking on a non-differentiable leaf.
    pub fn take(&mut self, leaf: Var) -> Tensor {
        self.grads[leaf.0].take().expect("gradient requested for a non-differentiable node")
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| Var(i))
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn rowwise(t: &Tensor, f: fn(&[f64], &mut [f64])) -> Tensor {
    let w = t.row_len();
    let mut out = Tensor::zeros(t.shape());
    for (src, dst) in t.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        f(src, dst);
    }
    out
}

/// Row-wise softmax of a `[N, C]` tensor.
pub fn softmax(t: &Tensor) -> Tensor {
    rowwise(t, softmax_row)
}

/// Row-wise log-softmax of a `[N, C]` tensor.
pub fn log_softmax(t: &Tensor) -> Tensor {
    rowwise(t, log_softmax_row)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

fn require_4d(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::shape(op, format!("expected a 4-D tensor, got {s:?}"))),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, value: Tensor) -> Result<Var> {
        let n = self.needs(a);
        self.push(value, op, n)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, value: Tensor) -> Result<Var> {
        let n = self.needs(a) || self.needs(b);
        self.push(value, op, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.binary(a, b, Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.binary(a, b, Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.binary(a, b, Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.unary(a, Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, Op::AddScalar(a), v)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            MatRef::rowmajor(self.value(a).data(), k),
            MatRef::rowmajor(self.value(b).data(), n),
            0.0,
            out.data_mut(),
        );
        self.binary(a, b, Op::MatMul(a, b), out)
    }

    /// `[m,k] x [n,k]^T`, the dense-layer product `x W^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul_t", self.value(a))?;
        let (n, k2) = require_2d("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            MatRef::rowmajor(self.value(a).data(), k),
            MatRef::transposed(self.value(b).data(), k),
            0.0,
            out.data_mut(),
        );
        self.binary(a, b, Op::MatMulT(a, b), out)
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = require_2d("add_row", self.value(a))?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {n}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.binary(a, bias, Op::AddRow(a, bias), out)
    }

    /// Adds a `[C]` bias to every channel plane of a `[N,C,H,W]` tensor.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = require_4d("add_channel", self.value(a))?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_channel",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bc = b[i % c];
            plane.iter_mut().for_each(|x| *x += bc);
        }
        self.binary(a, bias, Op::AddChannel(a, bias), out)
    }

    /// Stride-1 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,k,k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = require_4d("conv2d", self.value(x))?;
        let [o, c2, k, k2] = require_4d("conv2d", self.value(w))?;
        if c != c2 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}, pad {pad}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, pad };
        let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
        let plane = oh * ow;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut cols = vec![0.0; patch * plane];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let img = c * h * wd;
            for (i, dst) in out.data_mut().chunks_mut(o * plane).enumerate() {
                geom.im2col(&xs[i * img..(i + 1) * img], &mut cols);
                gemm(o, patch, plane, MatRef::rowmajor(ws, patch), MatRef::rowmajor(&cols, plane), 0.0, dst);
            }
        }
        self.binary(x, w, Op::Conv2d { x, w, pad }, out)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = require_4d("max_pool2", self.value(x))?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool2", format!("spatial size {h}x{w} is below 2x2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xs = self.value(x).data();
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out.data_mut()[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        self.unary(x, Op::MaxPool2 { x, argmax }, out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, Op::Relu(a), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.value(a).shape()))
        })?;
        self.unary(a, Op::Reshape(a), v)
    }

    /// Collapses all trailing axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.unary(a, Op::Powf(a, p), v)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.unary(a, Op::Abs(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.unary(a, Op::Ln(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.unary(a, Op::Exp(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.unary(a, Op::Softplus(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        require_2d("log_softmax", self.value(a))?;
        let v = log_softmax(self.value(a));
        self.unary(a, Op::LogSoftmax(a), v)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        require_2d("softmax", self.value(a))?;
        let v = softmax(self.value(a));
        self.unary(a, Op::Softmax(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, Op::Mean(a), v)
    }

    /// Mean over rows of `-sum_c t_c log softmax(logits)_c`. `targets` rows
    /// may be any non-negative weights: one-hot labels or a uniform row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (n, c) = require_2d("cross_entropy", self.value(logits))?;
        if targets.shape() != [n, c] {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits [{n},{c}] vs targets {:?}", targets.shape()),
            ));
        }
        let lsm = log_softmax(self.value(logits));
        let total: f64 = lsm.data().iter().zip(targets.data()).map(|(l, t)| -l * t).sum();
        let v = Tensor::scalar(total / n as f64);
        self.unary(logits, Op::CrossEntropy { logits, targets: targets.clone() }, v)
    }

    /// Mean over rows of `KL(softmax(p) || softmax(q))`, both given as logits.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, c) = require_2d("kl_div", self.value(p))?;
        if self.value(q).shape() != [n, c] {
            return Err(Error::shape(
                "kl_div",
                format!("{:?} vs {:?}", self.value(p).shape(), self.value(q).shape()),
            ));
        }
        let lp = log_softmax(self.value(p));
        let lq = log_softmax(self.value(q));
        let total: f64 = lp
            .data()
            .iter()
            .zip(lq.data())
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum();
        let v = Tensor::scalar(total / n as f64);
        self.binary(p, q, Op::KlDiv { p, q }, v)
    }

    /// Forwards `value` but passes the incoming gradient straight to `a`.
    /// `value` must have the shape of `a`.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        self.value(a).same_shape(&value, "straight_through")?;
        self.unary(a, Op::StraightThrough(a), value)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        // Gradients of leaves were never taken, since leaves are skipped above.
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let is_param = node.needs_grad && matches!(node.op, Op::Leaf);
            out.push(if is_param { Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))) } else { None });
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?)?;
            }
            Op::MatMul(a, b) => {
                let (m, k) = require_2d("matmul", self.value(*a))?;
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rowmajor(g.data(), n),
                        MatRef::transposed(self.value(*b).data(), n),
                        0.0,
                        ga.data_mut(),
                    );
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.value(*a).data(), k),
                        MatRef::rowmajor(g.data(), n),
                        0.0,
                        gb.data_mut(),
                    );
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = require_2d("matmul_t", self.value(*a))?;
                let n = self.value(*b).shape()[0];
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rowmajor(g.data(), n),
                        MatRef::rowmajor(self.value(*b).data(), k),
                        0.0,
                        ga.data_mut(),
                    );
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[n, k]);
                    gemm(
                        n,
                        m,
                        k,
                        MatRef::transposed(g.data(), n),
                        MatRef::rowmajor(self.value(*a).data(), k),
                        0.0,
                        gb.data_mut(),
                    );
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (x, y) in gb.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
            }
            Op::AddChannel(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*bias) {
                    let [_, c, h, w] = require_4d("add_channel", self.value(*a))?;
                    let mut gb = Tensor::zeros(&[c]);
                    for (i, plane) in g.data().chunks(h * w).enumerate() {
                        gb.data_mut()[i % c] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
            }
            Op::Conv2d { x, w, pad } => {
                let [n, c, h, wd] = require_4d("conv2d", self.value(*x))?;
                let [o, _, k, _] = require_4d("conv2d", self.value(*w))?;
                let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, pad: *pad };
                let (plane, patch) = (geom.out_h() * geom.out_w(), geom.patch());
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let img = c * h * wd;
                let mut cols = vec![0.0; patch * plane];
                let mut gcols = vec![0.0; patch * plane];
                let mut gw = self.needs(*w).then(|| Tensor::zeros(&[o, c, k, k]));
                let mut gx = self.needs(*x).then(|| Tensor::zeros(&[n, c, h, wd]));
                for i in 0..n {
                    let go = &g.data()[i * o * plane..(i + 1) * o * plane];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&xs[i * img..(i + 1) * img], &mut cols);
                        gemm(
                            o,
                            plane,
                            patch,
                            MatRef::rowmajor(go, plane),
                            MatRef::transposed(&cols, plane),
                            1.0,
                            gw.data_mut(),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            patch,
                            o,
                            plane,
                            MatRef::transposed(ws, patch),
                            MatRef::rowmajor(go, plane),
                            0.0,
                            &mut gcols,
                        );
                        geom.col2im(&gcols, &mut gx.data_mut()[i * img..(i + 1) * img]);
                    }
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw)?;
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Relu(a) => {
                let ga = self.value(*a).zip_map(g, "relu", |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = self.value(*a).zip_map(g, "powf", |x, gv| gv * p * x.powf(p - 1.0))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Abs(a) => {
                let ga = self.value(*a).zip_map(g, "abs", |x, gv| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Ln(a) => {
                let ga = self.value(*a).zip_map(g, "ln", |x, gv| gv / x)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Exp(a) => {
                let ga = node.value.mul(g)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softplus(a) => {
                let ga = self.value(*a).zip_map(g, "softplus", |x, gv| gv * sigmoid(x))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSoftmax(a) => {
                let c = node.value.row_len();
                let mut ga = g.clone();
                for (grow, lrow) in ga.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for (gv, l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * s;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax(a) => {
                let c = node.value.row_len();
                let mut ga = g.clone();
                for (grow, srow) in ga.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for (gv, s) in grow.iter_mut().zip(srow) {
                        *gv = s * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let ga = Tensor::full(self.value(*a).shape(), g.item() / n);
                self.accumulate(grads, *a, ga)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let (n, c) = (z.rows(), z.row_len());
                let sm = softmax(z);
                let scale = g.item() / n as f64;
                let mut gz = Tensor::zeros(z.shape());
                for i in 0..n {
                    let trow = targets.row(i);
                    let tsum: f64 = trow.iter().sum();
                    let srow = sm.row(i);
                    let dst = &mut gz.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] = scale * (srow[j] * tsum - trow[j]);
                    }
                }
                self.accumulate(grads, *logits, gz)?;
            }
            Op::KlDiv { p, q } => {
                let (n, c) = (self.value(*p).rows(), self.value(*p).row_len());
                let lp = log_softmax(self.value(*p));
                let lq = log_softmax(self.value(*q));
                let scale = g.item() / n as f64;
                let mut gp = Tensor::zeros(&[n, c]);
                let mut gq = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let (lpr, lqr) = (lp.row(i), lq.row(i));
                    let kl: f64 = lpr.iter().zip(lqr).map(|(&a, &b)| a.exp() * (a - b)).sum();
                    for j in 0..c {
                        let pj = lpr[j].exp();
                        gp.data_mut()[i * c + j] = scale * pj * (lpr[j] - lqr[j] - kl);
                        gq.data_mut()[i * c + j] = scale * (lqr[j].exp() - pj);
                    }
                }
                if self.needs(*p) {
                    self.accumulate(grads, *p, gp)?;
                }
                if self.needs(*q) {
                    self.accumulate(grads, *q, gq)?;
                }
            }
        }
        Ok(())
    }
}

/// Hessian-vector product by central differences of gradients.
///
/// `grad_fn` maps a parameter list to the gradient list of the loss.
/// The step is `sqrt(2^-52) * (1 + ||w||) / max(||v||, 1e-12)`.
pub fn hvp<F>(mut grad_fn: F, params: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if params.is_empty() {
        return Err(Error::arg("hvp over an empty parameter list"));
    }
    if params.len() != v.len() {
        return Err(Error::shape("hvp", format!("{} params vs {} directions", params.len(), v.len())));
    }
    for (p, d) in params.iter().zip(v) {
        p.same_shape(d, "hvp")?;
    }
    let norm = |ts: &[Tensor]| ts.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Ok(v.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }
    let eps = f64::EPSILON.sqrt() * (1.0 + norm(params)) / v_norm.max(1e-12);
    let shifted = |sign: f64| -> Result<Vec<Tensor>> {
        params
            .iter()
            .zip(v)
            .map(|(p, d)| {
                let mut q = p.clone();
                q.axpy(sign * eps, d)?;
                Ok(q)
            })
            .collect()
    };
    let plus = grad_fn(&shifted(1.0)?)?;
    let minus = grad_fn(&shifted(-1.0)?)?;
    plus.iter()
        .zip(&minus)
        .map(|(a, b)| Ok(a.sub(b)?.scale(0.5 / eps)))
        .collect()
}
