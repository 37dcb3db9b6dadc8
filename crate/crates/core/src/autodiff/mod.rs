//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op as it is evaluated, so nodes are stored in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Ops that need a non-standard derivative (the straight-through rounding,
//! the fused channel quantizer) either have a dedicated variant or plug in
//! through [`CustomOp`].

pub mod kernels;

use thiserror::Error;

use crate::tensor::{Element, Tensor};
use kernels::ConvGeometry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> GraphError {
    GraphError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op with a caller-supplied derivative.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GraphError>;

    /// Gradient contribution for each input (`None` for no contribution).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, GraphError>;
}

/// Batch-normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    training: bool,
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Exp2(Var),
    Abs(Var),
    Relu(Var),
    Clamp { x: Var, lo: Var, hi: Var },
    RoundSte(Var),
    StopGrad,
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Matmul { a: Var, b: Var, transpose_b: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ChannelBias { x: Var, bias: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<u32> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn scalar_value(&self, op: &'static str, v: Var) -> Result<T, GraphError> {
        self.value(v)
            .item()
            .ok_or_else(|| shape_err(op, format!("expected a scalar, got {:?}", self.value(v).shape())))
    }

    /// Input tensor. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, GraphError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, GraphError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, GraphError> {
        self.leaf(value, false)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    /// `x * s` with `s` a one-element node broadcast over `x`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, GraphError> {
        let sv = self.scalar_value("mul_scalar", s)?;
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        self.push("mul_scalar", value, Op::MulScalar(x, s), rg)
    }

    /// `x + s` with `s` a one-element node broadcast over `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, GraphError> {
        let sv = self.scalar_value("add_scalar", s)?;
        let value = self.value(x).map(|v| v + sv);
        let rg = self.rg(&[x, s]);
        self.push("add_scalar", value, Op::AddScalar(x, s), rg)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GraphError> {
        let c = T::of_f64(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var, GraphError> {
        let c = T::of_f64(c);
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_const", value, Op::AddConst(x), rg)
    }

    /// Elementwise `2^x`.
    pub fn exp2(&mut self, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).map(T::exp2);
        let rg = self.rg(&[x]);
        self.push("exp2", value, Op::Exp2(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).map(T::abs);
        let rg = self.rg(&[x]);
        self.push("abs", value, Op::Abs(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    /// `min(max(x, lo), hi)` with scalar bounds that are themselves
    /// differentiable. A value sitting exactly on a bound counts as clamped;
    /// when `lo == hi` it is attributed to `lo`.
    pub fn clamp(&mut self, x: Var, lo: Var, hi: Var) -> Result<Var, GraphError> {
        let l = self.scalar_value("clamp", lo)?;
        let h = self.scalar_value("clamp", hi)?;
        if l > h {
            return Err(GraphError::Invalid {
                op: "clamp",
                detail: format!("lower bound {l} exceeds upper bound {h}"),
            });
        }
        let value = self.value(x).map(|v| v.max(l).min(h));
        let rg = self.rg(&[x, lo, hi]);
        self.push("clamp", value, Op::Clamp { x, lo, hi }, rg)
    }

    /// Round to nearest, ties to even; the backward pass is the identity
    /// (straight-through estimator).
    pub fn round_ste(&mut self, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).map(T::round_even);
        let rg = self.rg(&[x]);
        self.push("round_ste", value, Op::RoundSte(x), rg)
    }

    /// Identity in the forward pass, blocks all gradient.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).clone();
        self.push("stop_grad", value, Op::StopGrad, false)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let s = kernels::ordered_sum(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(T::of_f64(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let m = kernels::ordered_sum(t.data()) / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(T::of_f64(m)), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape.to_vec())
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (kb, n, b_strides) = if transpose_b {
            (tb.dim(1), tb.dim(0), (1, tb.dim(1) as isize))
        } else {
            (tb.dim(0), tb.dim(1), (tb.dim(1) as isize, 1))
        };
        if k != kb {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros([m, n]);
        T::gemm(m, k, n, T::one(), ta.data(), (k as isize, 1), tb.data(), b_strides, T::zero(), out.data_mut(), (n as isize, 1));
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::Matmul { a, b, transpose_b }, rg)
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.matmul_impl(a, b, false)
    }

    /// Dense layer product `x · wᵀ`: `[N, I] x [O, I] -> [N, O]`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var, GraphError> {
        self.matmul_impl(x, w, true)
    }

    /// 2-D convolution, zero padding. `x` is `[C, N, H, W]`, `w` is
    /// `[O, C, KH, KW]`, output is `[O, N, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, GraphError> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)
            .map_err(|d| shape_err("conv2d", d))?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let rg = self.rg(&[x, w]);
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, rg)
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, GraphError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() == 0 || tb.shape() != [tx.dim(0)] {
            return Err(shape_err("channel_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let inner = tx.len() / tx.dim(0);
        let mut out = tx.clone();
        for (chunk, &b) in out.data_mut().chunks_mut(inner.max(1)).zip(tb.data()) {
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        let rg = self.rg(&[x, bias]);
        self.push("channel_bias", out, Op::ChannelBias { x, bias }, rg)
    }

    /// Batch normalization over all axes but the first (channel) one.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<Var, GraphError> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(shape_err("batch_norm", "scalar input"));
        }
        let c = tx.dim(0);
        let per = tx.len() / c.max(1);
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(shape_err("batch_norm", format!("parameter {:?} for {c} channels", self.value(p).shape())));
            }
        }
        if per == 0 {
            return Err(shape_err("batch_norm", "no elements per channel"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(tx.shape().to_vec());
        let mut out = Tensor::zeros(tx.shape().to_vec());
        let mut inv_std = Vec::with_capacity(c);
        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        let training = matches!(stats, NormStats::Batch);
        if let NormStats::Fixed { mean, var } = stats {
            if mean.len() != c || var.len() != c {
                return Err(shape_err("batch_norm", "running statistics length"));
            }
        }
        for ch in 0..c {
            let xs = &tx.data()[ch * per..(ch + 1) * per];
            let (mu, var) = match stats {
                NormStats::Batch => {
                    let mu = kernels::ordered_sum(xs) / per as f64;
                    let var = xs.iter().fold(0.0f64, |acc, &v| {
                        let d = v.as_f64() - mu;
                        acc + d * d
                    }) / per as f64;
                    batch_mean.push(T::of_f64(mu));
                    batch_var.push(T::of_f64(var));
                    (T::of_f64(mu), T::of_f64(var))
                }
                NormStats::Fixed { mean, var } => (mean[ch], var[ch]),
            };
            let is = T::one() / (var + T::of_f64(eps)).sqrt();
            inv_std.push(is);
            let xh = &mut xhat.data_mut()[ch * per..(ch + 1) * per];
            let o = &mut out.data_mut()[ch * per..(ch + 1) * per];
            for ((h, y), &v) in xh.iter_mut().zip(o.iter_mut()).zip(xs) {
                *h = (v - mu) * is;
                *y = g[ch] * *h + b[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let cache = NormCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
            training,
        };
        self.push("batch_norm", out, Op::BatchNorm { x, gamma, beta, cache }, rg)
    }

    /// Per-channel `(mean, biased variance)` of a batch-statistics
    /// [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm { cache, .. } if cache.training => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var, GraphError> {
        let (out, argmax) = kernels::max_pool2(self.value(x)).map_err(|d| shape_err("max_pool2", d))?;
        let rg = self.rg(&[x]);
        self.push("max_pool2", out, Op::MaxPool2 { x, argmax }, rg)
    }

    fn global_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize), GraphError> {
        let t = self.value(x);
        if t.rank() != 4 || t.dim(2) * t.dim(3) == 0 {
            return Err(shape_err(op, format!("expected non-empty [C, N, H, W], got {:?}", t.shape())));
        }
        Ok((t.dim(0), t.dim(1), t.dim(2) * t.dim(3)))
    }

    /// `[C, N, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, GraphError> {
        let (c, n, plane) = self.global_dims("global_avg_pool", x)?;
        let d = self.value(x).data();
        let mut out = Tensor::zeros([n, c]);
        for ch in 0..c {
            for b in 0..n {
                let s = kernels::ordered_sum(&d[(ch * n + b) * plane..][..plane]);
                out.data_mut()[b * c + ch] = T::of_f64(s / plane as f64);
            }
        }
        let rg = self.rg(&[x]);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), rg)
    }

    /// `[C, N, H, W] -> [N, C]` spatial maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, GraphError> {
        let (c, n, plane) = self.global_dims("global_max_pool", x)?;
        let d = self.value(x).data();
        let mut out = Tensor::zeros([n, c]);
        let mut argmax = vec![0u32; n * c];
        for ch in 0..c {
            for b in 0..n {
                let base = (ch * n + b) * plane;
                let mut best = base;
                for i in base..base + plane {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.data_mut()[b * c + ch] = d[best];
                argmax[b * c + ch] = best as u32;
            }
        }
        let rg = self.rg(&[x]);
        self.push("global_max_pool", out, Op::GlobalMaxPool { x, argmax }, rg)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GraphError> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)
            .map_err(|d| shape_err("softmax_cross_entropy", d))?;
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var, GraphError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let name = op.name();
        let rg = self.rg(inputs);
        self.push(
            name,
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and influences the loss gets one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, GraphError> {
        let node = self.nodes.get(loss.0).ok_or(GraphError::UnknownNode(loss.0))?;
        if node.value.len() != 1 {
            return Err(GraphError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(GraphError::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, GraphError> {
        let node = &self.nodes[i];
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape");
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    out.push((*a, like(*a, gd.iter().zip(tb).map(|(&u, &y)| u * y).collect())));
                }
                if want(*b) {
                    out.push((*b, like(*b, gd.iter().zip(ta).map(|(&u, &x)| u * x).collect())));
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                if want(*x) {
                    out.push((*x, g.map(|u| u * sv)));
                }
                if want(*s) {
                    let acc = gd.iter().zip(self.value(*x).data()).fold(0.0f64, |a, (&u, &v)| a + (u * v).as_f64());
                    out.push((*s, like(*s, vec![T::of_f64(acc)])));
                }
            }
            Op::AddScalar(x, s) => {
                out.push((*x, g.clone()));
                if want(*s) {
                    out.push((*s, like(*s, vec![T::of_f64(kernels::ordered_sum(gd))])));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|u| u * *c))),
            Op::AddConst(x) | Op::RoundSte(x) => out.push((*x, g.clone())),
            Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec()))),
            Op::Exp2(x) => {
                let y = node.value.data();
                out.push((*x, like(*x, gd.iter().zip(y).map(|(&u, &v)| u * v * T::LN_2).collect())));
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xs)
                    .map(|(&u, &v)| {
                        if v > T::zero() {
                            u
                        } else if v < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = gd.iter().zip(xs).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect();
                out.push((*x, like(*x, d)));
            }
            Op::Clamp { x, lo, hi } => {
                let l = self.value(*lo).data()[0];
                let h = self.value(*hi).data()[0];
                let xs = self.value(*x).data();
                let mut dx = Vec::with_capacity(xs.len());
                let (mut dlo, mut dhi) = (0.0f64, 0.0f64);
                for (&u, &v) in gd.iter().zip(xs) {
                    if v <= l {
                        dlo += u.as_f64();
                        dx.push(T::zero());
                    } else if v >= h {
                        dhi += u.as_f64();
                        dx.push(T::zero());
                    } else {
                        dx.push(u);
                    }
                }
                if want(*x) {
                    out.push((*x, like(*x, dx)));
                }
                if want(*lo) {
                    out.push((*lo, like(*lo, vec![T::of_f64(dlo)])));
                }
                if want(*hi) {
                    out.push((*hi, like(*hi, vec![T::of_f64(dhi)])));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0]))),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0] / T::of_f64(n as f64))));
            }
            Op::Matmul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.dim(0), ta.dim(1));
                let n = g.dim(1);
                if want(*a) {
                    // da[M,K] = g[M,N] · B^T where B is the logical [K,N] operand.
                    let b_t = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    let mut da = Tensor::zeros([m, k]);
                    T::gemm(m, n, k, T::one(), gd, (n as isize, 1), tb.data(), b_t, T::zero(), da.data_mut(), (k as isize, 1));
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = Tensor::zeros(tb.shape().to_vec());
                    if *transpose_b {
                        // db[N,K] = g^T[N,M] · a[M,K]
                        T::gemm(n, m, k, T::one(), gd, (1, n as isize), ta.data(), (k as isize, 1), T::zero(), db.data_mut(), (k as isize, 1));
                    } else {
                        // db[K,N] = a^T[K,M] · g[M,N]
                        T::gemm(k, m, n, T::one(), ta.data(), (1, k as isize), gd, (n as isize, 1), T::zero(), db.data_mut(), (n as isize, 1));
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd, want(*x), want(*w));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::ChannelBias { x, bias } => {
                out.push((*x, g.clone()));
                if want(*bias) {
                    let c = self.value(*bias).len();
                    let per = gd.len() / c.max(1);
                    let db = (0..c).map(|ch| T::of_f64(kernels::ordered_sum(&gd[ch * per..(ch + 1) * per]))).collect();
                    out.push((*bias, like(*bias, db)));
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let c = cache.inv_std.len();
                let per = gd.len() / c;
                let gm = self.value(*gamma).data();
                let xh = cache.xhat.data();
                let mut dgamma = Vec::with_capacity(c);
                let mut dbeta = Vec::with_capacity(c);
                let mut dx = want(*x).then(|| vec![T::zero(); gd.len()]);
                for ch in 0..c {
                    let u = &gd[ch * per..(ch + 1) * per];
                    let h = &xh[ch * per..(ch + 1) * per];
                    let sb = kernels::ordered_sum(u);
                    let sg = u.iter().zip(h).fold(0.0f64, |a, (&uu, &hh)| a + (uu * hh).as_f64());
                    dbeta.push(T::of_f64(sb));
                    dgamma.push(T::of_f64(sg));
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[ch * per..(ch + 1) * per];
                        let k = gm[ch] * cache.inv_std[ch];
                        if cache.training {
                            let mb = T::of_f64(sb / per as f64);
                            let mg = T::of_f64(sg / per as f64);
                            for ((d, &uu), &hh) in dst.iter_mut().zip(u).zip(h) {
                                *d = k * (uu - mb - hh * mg);
                            }
                        } else {
                            for (d, &uu) in dst.iter_mut().zip(u) {
                                *d = k * uu;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)));
                }
                if want(*gamma) {
                    out.push((*gamma, like(*gamma, dgamma)));
                }
                if want(*beta) {
                    out.push((*beta, like(*beta, dbeta)));
                }
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&u, &a) in gd.iter().zip(argmax) {
                    dx[a as usize] = dx[a as usize] + u;
                }
                out.push((*x, like(*x, dx)));
            }
            Op::GlobalAvgPool(x) => {
                let t = self.value(*x);
                let (c, n, plane) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
                let inv = T::of_f64(1.0 / plane as f64);
                let mut dx = vec![T::zero(); t.len()];
                for ch in 0..c {
                    for b in 0..n {
                        let u = gd[b * c + ch] * inv;
                        dx[(ch * n + b) * plane..][..plane].fill(u);
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let classes = self.value(*logits).dim(1);
                let scale = gd[0] / T::of_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    d[n * classes + l] = d[n * classes + l] - scale;
                }
                out.push((*logits, like(*logits, d)));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&values, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(GraphError::Invalid {
                        op: op.name(),
                        detail: format!("backward returned {} gradients for {} inputs", gs.len(), inputs.len()),
                    });
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.value(*v).shape() {
                            return Err(shape_err(op.name(), "gradient shape differs from input"));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn op_name<T: Element>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::MulScalar(..) => "mul_scalar",
        Op::AddScalar(..) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp2(..) => "exp2",
        Op::Abs(..) => "abs",
        Op::Relu(..) => "relu",
        Op::Clamp { .. } => "clamp",
        Op::RoundSte(..) => "round_ste",
        Op::StopGrad => "stop_grad",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::Matmul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelBias { .. } => "channel_bias",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::GlobalMaxPool { .. } => "global_max_pool",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::Custom { op, .. } => op.name(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let d = g.stop_grad(x).unwrap();
        let y = g.mul(d, d).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn two_branch_accumulation() {
        // f = sum(3x) + sum(x * x): df/dx = 3 + 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let f = g.add(sa, sb).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss(_))));
        assert!(matches!(g.backward(Var(7)), Err(GraphError::UnknownNode(7))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![200.0])).unwrap();
        assert!(matches!(g.exp2(x), Err(GraphError::NonFinite { op: "exp2" })));
        assert!(g.leaf(Tensor::from_vec(vec![f32::NAN]), true).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2])).unwrap();
        let b = g.constant(Tensor::zeros([3])).unwrap();
        assert!(matches!(g.add(a, b), Err(GraphError::Shape { .. })));
        let w = g.constant(Tensor::zeros([4, 3, 3, 3])).unwrap();
        let x = g.constant(Tensor::zeros([2, 1, 5, 5])).unwrap();
        assert!(g.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn clamp_attributes_bounds() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[4], &[-3.0, 0.0, 2.0, 5.0])).unwrap();
        let lo = g.param(Tensor::scalar(-1.0)).unwrap();
        let hi = g.param(Tensor::scalar(2.0)).unwrap();
        let y = g.clamp(x, lo, hi).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.0, 2.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.get(lo).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(hi).unwrap().data(), &[2.0]);
    }

    #[test]
    fn round_ste_passes_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.5, 1.5, 2.4])).unwrap();
        let y = g.round_ste(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 2.0]);
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let img: Vec<f32> = (0..2 * 4 * 4).map(|v| v as f32 * 0.1).collect();
        let x = g.constant(Tensor::new([2, 1, 4, 4], img.clone()).unwrap()).unwrap();
        let mut k = vec![0.0f32; 2 * 2];
        k[0] = 1.0;
        k[3] = 1.0;
        let w = g.constant(Tensor::new([2, 2, 1, 1], k).unwrap()).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &img[..]);
    }

    #[test]
    fn conv_ones_kernel_sums_windows() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 1, 5, 5], 1.0)).unwrap();
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = g.param(t(&[1], &[1.0])).unwrap();
        let beta = g.param(t(&[1], &[0.0])).unwrap();
        let y = g.batch_norm(x, gamma, beta, NormStats::Batch, 0.0).unwrap();
        let v = g.value(y).data();
        assert!((v.iter().sum::<f64>()).abs() < 1e-12);
        assert!((v.iter().map(|a| a * a).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let (mean, var) = g.batch_stats(y).unwrap();
        assert_eq!(mean, &[2.5]);
        assert_eq!(var, &[1.25]);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(l).unwrap().data(), &[0.5, -0.5]);
    }
}
