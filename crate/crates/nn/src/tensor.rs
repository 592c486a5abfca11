//! Shaped f32 arrays and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. `backward` walks
//! the tape once from a scalar loss and leaves gradients on the leaves
//! created with [`Graph::param`]; the tape cannot be replayed afterwards.

use std::sync::Arc;

use gridsight_core::par::Execution;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    UpConv2 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    SoftmaxCe { logits: Var, probs: Vec<f32>, target: Vec<u32> },
    KlDiag { mu: Var, logvar: Var },
    Reparam { mu: Var, logvar: Var, eps: Vec<f32> },
    Scale { x: Var, alpha: f32 },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Execution,
    consumed: bool,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected N x C x H x W, got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::shape(op, format!("expected N x D, got {s:?}"))),
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose batch kernels use `exec`.
    pub fn with_execution(exec: Execution) -> Self {
        Self {
            exec,
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant input shared with the caller without copying.
    pub fn input_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, false)
    }

    /// Trainable leaf shared with the caller without copying.
    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    /// Move a leaf's gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after `backward`; `None` when nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 3x3 stride-1 convolution with zero padding 1. Weight `O x C x 3 x 3`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let o = match *self.shape(w) {
            [o, wc, 3, 3] if wc == c => o,
            ref s => return Err(Error::shape("conv2d", format!("weight {s:?} for {c} input channels"))),
        };
        if self.shape(b) != [o] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", self.shape(b))));
        }
        let d = ConvDims { c, o, h, w: wd };
        let mut out = vec![0.0f32; n * o * h * wd];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let in_len = c * h * wd;
            self.exec.for_each_chunk(&mut out, o * h * wd, |i, chunk| {
                kernels::conv3_forward(d, &xv[i * in_len..(i + 1) * in_len], wv, bv, chunk)
            });
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, o, h, wd], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// 2x2 stride-2 max pooling; ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("maxpool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatial {
                op: "maxpool2",
                height: h,
                width: w,
            });
        }
        let (in_len, out_len) = (c * h * w, c * h * w / 4);
        let mut out = vec![0.0f32; n * out_len];
        let mut argmax = vec![0u32; n * out_len];
        let xv = self.value(x).data();
        for i in 0..n {
            kernels::maxpool2_forward(
                &xv[i * in_len..(i + 1) * in_len],
                c,
                h,
                w,
                &mut out[i * out_len..(i + 1) * out_len],
                &mut argmax[i * out_len..(i + 1) * out_len],
            );
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, h / 2, w / 2], out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// 2x2 stride-2 transposed convolution. Weight `C x O x 2 x 2`.
    pub fn upconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = dims4("upconv2", self.value(x))?;
        let o = match *self.shape(w) {
            [wc, o, 2, 2] if wc == c => o,
            ref s => return Err(Error::shape("upconv2", format!("weight {s:?} for {c} input channels"))),
        };
        if self.shape(b) != [o] {
            return Err(Error::shape("upconv2", format!("bias {:?} for {o} outputs", self.shape(b))));
        }
        let d = ConvDims { c, o, h, w: wd };
        let mut out = vec![0.0f32; n * o * 4 * h * wd];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let in_len = c * h * wd;
            self.exec.for_each_chunk(&mut out, o * 4 * h * wd, |i, chunk| {
                kernels::upconv2_forward(d, &xv[i * in_len..(i + 1) * in_len], wv, bv, chunk)
            });
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, o, 2 * h, 2 * wd], out)?, Op::UpConv2 { x, w, b }, rg))
    }

    /// `x W + b` with `x: N x D`, `W: D x E`, `b: E`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2("linear", self.value(x))?;
        let e = match *self.shape(w) {
            [wd, e] if wd == d => e,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} for input width {d}"))),
        };
        if self.shape(b) != [e] {
            return Err(Error::shape("linear", format!("bias {:?} for width {e}", self.shape(b))));
        }
        let mut out = Vec::with_capacity(n * e);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(n, d, e, self.value(x).data(), (d, 1), self.value(w).data(), (e, 1), 1.0, &mut out, e);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, e], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Per-channel batch normalization of an `N x C x H x W` tensor.
    /// Train mode normalizes with batch statistics and updates `state`;
    /// eval mode uses the running statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = dims4("batchnorm", self.value(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(Error::shape("batchnorm", format!("{c} channels vs parameters {:?}", self.shape(gamma))));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::BatchTooSmall);
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let planes = || (0..n).map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
            let (mean, var) = if train {
                let mut s = 0.0f64;
                for r in planes() {
                    s += xv[r].iter().map(|&a| a as f64).sum::<f64>();
                }
                let mean = s / m;
                let mut ss = 0.0f64;
                for r in planes() {
                    ss += xv[r].iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>();
                }
                let var = ss / m;
                let unbiased = ss / (m - 1.0);
                let rm = &mut state.running_mean[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean as f32;
                let rv = &mut state.running_var[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for r in planes() {
                for k in r {
                    let xh = (xv[k] - mean) * is;
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Mean over the `N*H*W` cells of the cross-entropy between
    /// `softmax(logits)` along dim 1 and a one-hot `target` of the same
    /// shape. Returns a scalar.
    pub fn softmax_ce(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (n, k, h, w) = dims4("softmax_ce", self.value(logits))?;
        if target.shape() != self.shape(logits) {
            return Err(Error::shape("softmax_ce", format!("target {:?} vs logits {:?}", target.shape(), self.shape(logits))));
        }
        let hw = h * w;
        let mut classes = vec![0u32; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut hot = None;
                for c in 0..k {
                    match target.data[(i * k + c) * hw + p] {
                        0.0 => {}
                        1.0 if hot.is_none() => hot = Some(c),
                        _ => return Err(Error::NotOneHot(i * hw + p)),
                    }
                }
                classes[i * hw + p] = hot.ok_or(Error::NotOneHot(i * hw + p))? as u32;
            }
        }
        self.softmax_ce_classes(logits, classes)
    }

    /// Like [`Graph::softmax_ce`] with the target given as one class index
    /// per cell, ordered `N x H x W`.
    pub fn softmax_ce_classes(&mut self, logits: Var, target: Vec<u32>) -> Result<Var> {
        let (n, k, h, w) = dims4("softmax_ce", self.value(logits))?;
        let hw = h * w;
        if target.len() != n * hw {
            return Err(Error::shape("softmax_ce", format!("{} targets for {} cells", target.len(), n * hw)));
        }
        if let Some(p) = target.iter().position(|&t| t as usize >= k) {
            return Err(Error::NotOneHot(p));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; lv.len()];
        let mut total = 0.0f64;
        for i in 0..n {
            for p in 0..hw {
                let at = |c: usize| (i * k + c) * hw + p;
                let mx = (0..k).map(|c| lv[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for c in 0..k {
                    z += ((lv[at(c)] - mx) as f64).exp();
                }
                for c in 0..k {
                    probs[at(c)] = (((lv[at(c)] - mx) as f64).exp() / z) as f32;
                }
                let t = target[i * hw + p] as usize;
                total += z.ln() - (lv[at(t)] - mx) as f64;
            }
        }
        let loss = (total / (n * hw) as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, probs, target }, rg))
    }

    /// Batch mean of KL(N(mu, exp(logvar)) || N(0, I)).
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (n, l) = dims2("kl_diag_gaussian", self.value(mu))?;
        if self.shape(logvar) != [n, l] {
            return Err(Error::shape("kl_diag_gaussian", format!("logvar {:?} vs mu {:?}", self.shape(logvar), [n, l])));
        }
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let s: f64 = m
            .iter()
            .zip(lv)
            .map(|(&a, &b)| {
                let (a, b) = (a as f64, b as f64);
                1.0 + b - a * a - b.exp()
            })
            .sum();
        let kl = (-0.5 * s / n as f64) as f32;
        let rg = self.rg(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(kl), Op::KlDiag { mu, logvar }, rg))
    }

    /// `mu + exp(0.5 * logvar) * eps` with caller-supplied noise.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Vec<f32>) -> Result<Var> {
        let shape = self.shape(mu).to_vec();
        if self.shape(logvar) != shape.as_slice() || eps.len() != self.value(mu).len() {
            return Err(Error::shape("reparameterize", format!("mu {shape:?}, logvar {:?}, eps {}", self.shape(logvar), eps.len())));
        }
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let z = m.iter().zip(lv).zip(&eps).map(|((&a, &b), &e)| a + (0.5 * b).exp() * e).collect();
        let rg = self.rg(&[mu, logvar]);
        Ok(self.push(Tensor::new(&shape, z)?, Op::Reparam { mu, logvar, eps }, rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f32) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * alpha).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, alpha }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|&a| a as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::clone(self.value(x)).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (target, contrib) in self.node_backward(i, &g) {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (n, c, h, wd) = dims4("conv2d", self.value(*x)).expect("checked in forward");
                let o = node.value.shape[1];
                let d = ConvDims { c, o, h, w: wd };
                let (in_len, out_len) = (c * h * wd, o * h * wd);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_dx = self.needs(*x);
                let parts = self.exec.map(n, |s| {
                    kernels::conv3_backward(
                        d,
                        &xv[s * in_len..(s + 1) * in_len],
                        wv,
                        &g[s * out_len..(s + 1) * out_len],
                        need_dx,
                    )
                });
                self.collect_param_grads(parts, *x, *w, *b, in_len, n, &mut out);
            }
            Op::UpConv2 { x, w, b } => {
                let (n, c, h, wd) = dims4("upconv2", self.value(*x)).expect("checked in forward");
                let o = node.value.shape[1];
                let d = ConvDims { c, o, h, w: wd };
                let (in_len, out_len) = (c * h * wd, o * 4 * h * wd);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_dx = self.needs(*x);
                let parts = self.exec.map(n, |s| {
                    kernels::upconv2_backward(
                        d,
                        &xv[s * in_len..(s + 1) * in_len],
                        wv,
                        &g[s * out_len..(s + 1) * out_len],
                        need_dx,
                    )
                });
                self.collect_param_grads(parts, *x, *w, *b, in_len, n, &mut out);
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let in_len = self.value(*x).len();
                    let n = node.value.shape[0];
                    let (il, ol) = (in_len / n, argmax.len() / n);
                    let mut dx = vec![0.0f32; in_len];
                    for s in 0..n {
                        for k in 0..ol {
                            dx[s * il + argmax[s * ol + k] as usize] += g[s * ol + k];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = dims2("linear", self.value(*x)).expect("checked in forward");
                let e = node.value.shape[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; d * e];
                    kernels::gemm(d, n, e, xv, (1, d), g, (e, 1), 0.0, &mut dw, e);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; e];
                    for row in g.chunks_exact(e) {
                        add_into(&mut db, row);
                    }
                    out.push((*b, db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; n * d];
                    kernels::gemm(n, e, d, g, (e, 1), wv, (1, e), 0.0, &mut dx, d);
                    out.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    out.push((*x, xv.iter().zip(g).map(|(&a, &gg)| if a > 0.0 { gg } else { 0.0 }).collect()));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = dims4("batchnorm", &node.value).expect("checked in forward");
                let hw = h * w;
                let m = (n * hw) as f32;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = self.needs(*x).then(|| vec![0.0f32; n * c * hw]);
                for ch in 0..c {
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for s in 0..n {
                        let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for k in r {
                            sg += g[k] as f64;
                            sgx += (g[k] * xhat[k]) as f64;
                        }
                    }
                    dgamma[ch] = sgx as f32;
                    dbeta[ch] = sg as f32;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gv[ch] * inv_std[ch];
                        let (mg, mgx) = ((sg as f32) / m, (sgx as f32) / m);
                        for s in 0..n {
                            for k in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                dx[k] = if *train {
                                    scale * (g[k] - mg - xhat[k] * mgx)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxCe { logits, probs, target } => {
                if self.needs(*logits) {
                    let (n, k, h, w) = dims4("softmax_ce", self.value(*logits)).expect("checked in forward");
                    let hw = h * w;
                    let scale = g[0] / (n * hw) as f32;
                    let mut d = probs.clone();
                    for s in 0..n {
                        for p in 0..hw {
                            d[(s * k + target[s * hw + p] as usize) * hw + p] -= 1.0;
                        }
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    out.push((*logits, d));
                }
            }
            Op::KlDiag { mu, logvar } => {
                let n = self.shape(*mu)[0] as f32;
                let s = g[0] / n;
                if self.needs(*mu) {
                    out.push((*mu, self.value(*mu).data().iter().map(|&m| s * m).collect()));
                }
                if self.needs(*logvar) {
                    let d = self.value(*logvar).data().iter().map(|&lv| s * 0.5 * (lv.exp() - 1.0)).collect();
                    out.push((*logvar, d));
                }
            }
            Op::Reparam { mu, logvar, eps } => {
                if self.needs(*mu) {
                    out.push((*mu, g.to_vec()));
                }
                if self.needs(*logvar) {
                    let lv = self.value(*logvar).data();
                    let d = g.iter().zip(lv).zip(eps).map(|((&gg, &l), &e)| gg * 0.5 * (0.5 * l).exp() * e).collect();
                    out.push((*logvar, d));
                }
            }
            Op::Scale { x, alpha } => {
                if self.needs(*x) {
                    out.push((*x, g.iter().map(|&v| v * alpha).collect()));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
        }
        out
    }

    /// Sum per-sample (dW, db, dx) parts in sample order.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn collect_param_grads(
        &self,
        parts: Vec<(Vec<f32>, Vec<f32>, Option<Vec<f32>>)>,
        x: Var,
        w: Var,
        b: Var,
        in_len: usize,
        n: usize,
        out: &mut Vec<(Var, Vec<f32>)>,
    ) {
        let mut dw = vec![0.0f32; self.value(w).len()];
        let mut db = vec![0.0f32; self.value(b).len()];
        let mut dx = self.needs(x).then(|| Vec::with_capacity(in_len * n));
        for (pw, pb, px) in parts {
            add_into(&mut dw, &pw);
            add_into(&mut db, &pb);
            if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
                dx.extend_from_slice(&px);
            }
        }
        if self.needs(w) {
            out.push((w, dw));
        }
        if self.needs(b) {
            out.push((b, db));
        }
        if let Some(dx) = dx {
            out.push((x, dx));
        }
    }
}

/// Softmax along dim 1 of an `N x K x H x W` tensor.
pub fn softmax_channels(t: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = dims4("softmax", t)?;
    let hw = h * w;
    let mut out = vec![0.0f32; t.len()];
    for i in 0..n {
        for p in 0..hw {
            let at = |c: usize| (i * k + c) * hw + p;
            let mx = (0..k).map(|c| t.data[at(c)]).fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = (0..k).map(|c| ((t.data[at(c)] - mx) as f64).exp()).sum();
            for c in 0..k {
                out[at(c)] = (((t.data[at(c)] - mx) as f64).exp() / z) as f32;
            }
        }
    }
    Tensor::new(t.shape(), out)
}
