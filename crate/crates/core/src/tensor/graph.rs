//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order. [`Graph::backward`] replays the backward rules in
//! reverse and can run once per graph.

use super::ops::{self, LAYERNORM_EPS};
use super::{numel, DType, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm { input: Var, gamma: Var, beta: Option<Var>, eps: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Narrow { input: Var, start: usize },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride, padding, groups)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(y, Op::Conv2d { input, weight, bias, stride, padding, groups }, &inputs))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.record(y, Op::PixelShuffle(x, r), &[x]))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_unshuffle(self.value(x), r)?;
        Ok(self.record(y, Op::PixelUnshuffle(x, r), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.record(y, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.record(y, Op::Softmax(x, axis), &[x]))
    }

    pub fn layernorm_channels(&mut self, x: Var, gamma: Var, beta: Option<Var>) -> Result<Var> {
        let eps = LAYERNORM_EPS;
        let y = ops::layernorm_channels(self.value(x), self.value(gamma), beta.map(|b| self.value(b)), eps)?;
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        Ok(self.record(y, Op::LayerNorm { input: x, gamma, beta, eps }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose_last2(self.value(x))?;
        Ok(self.record(y, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.record(y, Op::Reshape(x), &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let y = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.record(y, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.record(y, Op::Scale(x, factor), &[x])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("mul_scalar expects a 1-element factor, got {:?}", self.shape(s)));
        }
        let f = self.value(s).data()[0];
        let dtype = self.value(x).dtype().promote(self.value(s).dtype());
        let y = self.value(x).map(|v| v * f).to_dtype(dtype);
        Ok(self.record(y, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        self.record(y, Op::Exp(x), &[x])
    }

    /// Slice `len` entries along the leading axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = t.shape()[0];
        if len == 0 || start + len > lead {
            return shape_err(format!("narrow {start}+{len} out of range for {:?}", t.shape()));
        }
        let inner = numel(&t.shape()[1..]);
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let y = Tensor::from_parts(shape, data, t.dtype());
        Ok(self.record(y, Op::Narrow { input: x, start }, &[x]))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut dtype = self.value(first).dtype();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return shape_err(format!("concat: trailing shape {:?} vs {:?}", &t.shape()[1..], tail));
            }
            lead += t.shape()[0];
            dtype = dtype.promote(t.dtype());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let y = Tensor::from_parts(shape, data, dtype);
        Ok(self.record(y, Op::Concat(xs.to_vec()), xs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::from_parts(vec![1], vec![t.sum()], t.dtype());
        self.record(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::from_parts(vec![1], vec![t.mean()], t.dtype());
        self.record(y, Op::Mean(x), &[x])
    }

    /// Mean absolute error between two same-shape values.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape(p, t, "l1_loss")?;
        let v = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let y = Tensor::from_parts(vec![1], vec![v], p.dtype().promote(t.dtype()));
        Ok(self.record(y, Op::L1(pred, target), &[pred, target]))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(loss_shape, vec![1.0], DType::F64));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias, stride, padding, groups } => {
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                        *groups,
                        needs(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if needs(*weight) {
                        accumulate(&mut grads, *weight, cg.weight)?;
                    }
                    if let Some(b) = bias.filter(|b| needs(*b)) {
                        accumulate(&mut grads, b, cg.bias)?;
                    }
                }
                Op::PixelShuffle(x, r) => {
                    let gx = ops::pixel_unshuffle(&g, *r)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::PixelUnshuffle(x, r) => {
                    let gx = ops::pixel_shuffle(&g, *r)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let d: Vec<f64> =
                        xv.data().iter().zip(g.data()).map(|(&a, &gg)| gg * ops::gelu_derivative(a)).collect();
                    accumulate(&mut grads, *x, f64_like(xv, d))?;
                }
                Op::Softmax(x, axis) => {
                    let gx = ops::softmax_backward(&node.value, &g, *axis)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LayerNorm { input, gamma, beta, eps } => {
                    let lg = ops::layernorm_channels_backward(self.value(*input), self.value(*gamma), &g, *eps)?;
                    if needs(*input) {
                        accumulate(&mut grads, *input, lg.input)?;
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads, *gamma, lg.gamma)?;
                    }
                    if let Some(b) = beta.filter(|b| needs(*b)) {
                        accumulate(&mut grads, b, lg.beta)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        let bt = ops::transpose_last2(self.value(*b))?;
                        accumulate(&mut grads, *a, ops::matmul(&g, &bt.to_dtype(DType::F64))?)?;
                    }
                    if needs(*b) {
                        let at = ops::transpose_last2(self.value(*a))?;
                        accumulate(&mut grads, *b, ops::matmul(&at.to_dtype(DType::F64), &g)?)?;
                    }
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, ops::transpose_last2(&g)?)?;
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?)?;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v))?;
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?.to_dtype(DType::F64))?;
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?.to_dtype(DType::F64))?;
                    }
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, g.map(|v| v * f))?;
                }
                Op::MulScalar(x, s) => {
                    if needs(*x) {
                        let f = self.value(*s).data()[0];
                        accumulate(&mut grads, *x, g.map(|v| v * f))?;
                    }
                    if needs(*s) {
                        let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                        let shape = self.shape(*s).to_vec();
                        accumulate(&mut grads, *s, Tensor::from_parts(shape, vec![d], DType::F64))?;
                    }
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |a, y| a * y)?.to_dtype(DType::F64);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Narrow { input, start } => {
                    let src = self.value(*input);
                    let inner = numel(&src.shape()[1..]);
                    let mut d = vec![0.0; src.len()];
                    d[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *input, f64_like(src, d))?;
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        if needs(x) {
                            let d = g.data()[offset..offset + n].to_vec();
                            accumulate(&mut grads, x, f64_like(self.value(x), d))?;
                        }
                        offset += n;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, f64_like(xv, vec![gv; xv.len()]))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.data()[0] / xv.len() as f64;
                    accumulate(&mut grads, *x, f64_like(xv, vec![gv; xv.len()]))?;
                }
                Op::L1(p, t) => {
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let scale = g.data()[0] / pv.len() as f64;
                    let d: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| sign(a - b) * scale).collect();
                    if needs(*t) {
                        accumulate(&mut grads, *t, f64_like(tv, d.iter().map(|v| -v).collect()))?;
                    }
                    if needs(*p) {
                        accumulate(&mut grads, *p, f64_like(pv, d))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Subgradient sign with `sign(0) = 0`.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn f64_like(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), data, DType::F64)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return shape_err(format!("gradient shape {:?} vs {:?}", existing.shape(), g.shape()));
            }
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
