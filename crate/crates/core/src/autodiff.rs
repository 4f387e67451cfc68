//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter the graph through [`Graph::param`]; frozen parameters
//! enter as constants and never receive gradients.
//!
//! Elementwise binary ops (`add`, `sub`, `mul`) broadcast with the usual
//! right-aligned rules; gradients are summed back over broadcast axes.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Minimum,
    Conv2d { stride: usize, pad: usize },
    MaxPool2,
    LayerNorm { eps: f64 },
    Softmax,
    LogSoftmax,
    Gather(Vec<usize>),
    Sum,
    Mean,
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Gradients for every trainable parameter that entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Index into a broadcast operand for every flat position of `out`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    if shape == out {
        return (0..total).collect();
    }
    let inner: usize = shape.iter().product();
    if shape.len() <= out.len() && out[out.len() - shape.len()..] == *shape {
        return (0..total).map(|i| i % inner).collect();
    }
    let strides = broadcast_strides(shape, out);
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(total);
    for _ in 0..total {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}

fn reduce_to(grad: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, &j) in grad.iter().zip(map) {
        out[j] += g;
    }
    out
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let cols = *t
        .shape()
        .last()
        .ok_or_else(|| Error::shape(op, "expected at least one axis"))?;
    if cols == 0 {
        return Err(Error::shape(op, "empty last axis"));
    }
    Ok((t.numel() / cols, cols))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::new(vec![m, n], data)?))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Op::Transpose, vec![a], Tensor::new(vec![c, r], data)?))
    }

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ia = broadcast_index(ta.shape(), &out_shape);
            let ib = broadcast_index(tb.shape(), &out_shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok(self.push(op, vec![a, b], Tensor::new(out_shape, data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(op, vec![a], value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(k), a, |x| k * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    /// Elementwise minimum of two same-shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "minimum",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        self.binary(Op::Minimum, "minimum", a, b, f64::min)
    }

    /// NCHW input, OIHW kernel, no bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, kernel, stride, pad)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, kernel], Tensor::new(shape, data)?))
    }

    fn conv_geom(&self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected NCHW and OIHW, got {sx:?} and {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", sx[1], sk[1]),
            ));
        }
        if stride == 0 || sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} does not fit input {:?} with pad {pad}, stride {stride}", &sk[2..], &sx[2..]),
            ));
        }
        Ok(ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        })
    }

    /// 2×2 max pooling with stride 2 over NCHW (odd trailing rows/cols dropped).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2", format!("expected NCHW with H,W ≥ 2, got {s:?}")));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in src.chunks_exact(s[2] * s[3]) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * s[3] + 2 * ox;
                    let m = plane[i].max(plane[i + 1]).max(plane[i + s[3]]).max(plane[i + s[3] + 1]);
                    out.push(m);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(Op::MaxPool2, vec![x], value))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both
    /// shaped like the last axis).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = last_axis("layernorm", self.value(x))?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} must be [{cols}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xd, gd, bd) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(rows * cols);
        for row in xd.chunks_exact(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out.push((row[j] - mean) * inv * gd[j] + bd[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], value))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = last_axis("softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = last_axis("log_softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(Op::LogSoftmax, vec![x], value))
    }

    /// Picks `x[i, idx[i]]` from a `[B, C]` tensor, giving `[B]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape(
                "gather",
                format!("input {s:?} with {} indices", idx.len()),
            ));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {cols} columns")));
        }
        let xd = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| xd[r * cols + c]).collect();
        let value = Tensor::from_vec(out);
        Ok(self.push(Op::Gather(idx.to_vec()), vec![x], value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(m))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(i, d)| i == axis || *d == first[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), value))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Narrow { axis, start }, vec![x], value))
    }

    /// Reverse sweep from a one-element `loss`. Every requires-grad leaf
    /// receives a gradient (zero when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if let Some(id) = node.param {
                let g = grads[i].clone().expect("filled above");
                match params.iter_mut().find(|(p, _): &&mut (ParamId, Tensor)| *p == id) {
                    Some((_, acc)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => params.push((id, g)),
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let out = &node.value;
        let same = |data: Vec<f64>, like: &Tensor| Tensor::new(like.shape().to_vec(), data).map(Some);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = if wants(0) {
                    let bt = kernels::transpose(b.data(), k, n);
                    same(kernels::matmul(g.data(), &bt, m, n, k), a)?
                } else {
                    None
                };
                let gb = if wants(1) {
                    let at = kernels::transpose(a.data(), m, k);
                    same(kernels::matmul(&at, g.data(), k, m, n), b)?
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose => {
                let s = out.shape();
                vec![same(kernels::transpose(g.data(), s[0], s[1]), val(0))?]
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                let ia = broadcast_index(a.shape(), out.shape());
                let ib = broadcast_index(b.shape(), out.shape());
                let (ga, gb): (Vec<f64>, Vec<f64>) = match node.op {
                    Op::Add => (g.data().to_vec(), g.data().to_vec()),
                    Op::Sub => (g.data().to_vec(), g.data().iter().map(|x| -x).collect()),
                    _ => (
                        g.data().iter().zip(&ib).map(|(x, &j)| x * b.data()[j]).collect(),
                        g.data().iter().zip(&ia).map(|(x, &i)| x * a.data()[i]).collect(),
                    ),
                };
                vec![
                    if wants(0) { same(reduce_to(&ga, &ia, a.numel()), a)? } else { None },
                    if wants(1) { same(reduce_to(&gb, &ib, b.numel()), b)? } else { None },
                ]
            }
            Op::Scale(k) => vec![same(g.data().iter().map(|x| k * x).collect(), out)?],
            Op::Relu => {
                let x = val(0);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                vec![same(d, x)?]
            }
            Op::Exp => vec![same(g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect(), out)?],
            Op::Clamp { lo, hi } => {
                let x = val(0);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                vec![same(d, x)?]
            }
            Op::Minimum => {
                let (a, b) = (val(0), val(1));
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for i in 0..a.numel() {
                    if a.data()[i] <= b.data()[i] {
                        ga[i] = g.data()[i];
                    } else {
                        gb[i] = g.data()[i];
                    }
                }
                vec![same(ga, a)?, same(gb, b)?]
            }
            Op::Conv2d { stride, pad } => {
                let geom = self.conv_geom(node.inputs[0], node.inputs[1], *stride, *pad)?;
                let (x, k) = (val(0), val(1));
                let (dx, dk) = kernels::conv2d_backward(x.data(), k.data(), g.data(), &geom);
                vec![
                    if wants(0) { same(dx, x)? } else { None },
                    if wants(1) { same(dk, k)? } else { None },
                ]
            }
            Op::MaxPool2 => {
                let x = val(0);
                let s = x.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; x.numel()];
                for (p, (plane, gplane)) in x
                    .data()
                    .chunks_exact(h * w)
                    .zip(g.data().chunks_exact(oh * ow))
                    .enumerate()
                {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let i = 2 * oy * w + 2 * ox;
                            let cands = [i, i + 1, i + w, i + w + 1];
                            let mut best = cands[0];
                            for &c in &cands[1..] {
                                if plane[c] > plane[best] {
                                    best = c;
                                }
                            }
                            dx[p * h * w + best] += gplane[oy * ow + ox];
                        }
                    }
                }
                vec![same(dx, x)?]
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (val(0), val(1));
                let cols = *x.shape().last().expect("checked in forward");
                let n = cols as f64;
                let gd = gain.data();
                let mut dx = vec![0.0; x.numel()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for (r, (row, grow)) in x.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)).enumerate() {
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(g, s)| g * s).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                vec![same(dx, x)?, same(dgain, gain)?, same(dbias, val(2))?]
            }
            Op::Softmax => {
                let cols = *out.shape().last().expect("checked in forward");
                let mut dx = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![same(dx, out)?]
            }
            Op::LogSoftmax => {
                let cols = *out.shape().last().expect("checked in forward");
                let mut dx = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let total: f64 = gr.iter().sum();
                    dx.extend(y.iter().zip(gr).map(|(y, g)| g - y.exp() * total));
                }
                vec![same(dx, out)?]
            }
            Op::Gather(idx) => {
                let x = val(0);
                let cols = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                for (r, (&c, gv)) in idx.iter().zip(g.data()).enumerate() {
                    dx[r * cols + c] += gv;
                }
                vec![same(dx, x)?]
            }
            Op::Sum => {
                let x = val(0);
                vec![Some(Tensor::full(x.shape(), g.item()))]
            }
            Op::Mean => {
                let x = val(0);
                vec![Some(Tensor::full(x.shape(), g.item() / x.numel() as f64))]
            }
            Op::Reshape => vec![same(g.data().to_vec(), val(0))?],
            Op::Concat { axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut res = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let x = val(k);
                    let w = x.shape()[*axis];
                    if wants(k) {
                        let mut d = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + w * inner]);
                        }
                        res.push(same(d, x)?);
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }
            Op::Narrow { axis, start } => {
                let x = val(0);
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let (full, len) = (x.shape()[*axis], out.shape()[*axis]);
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![same(dx, x)?]
            }
        })
    }
}
