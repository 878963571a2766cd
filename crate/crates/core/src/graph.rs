//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order, which is already a topological order. [`Graph::backward`]
//! walks the tape in exact reverse and accumulates adjoints into the nodes
//! that require gradients. The tape is rebuilt for every iteration; a graph
//! can be differentiated exactly once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::quant::{self, QuantGrid};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by [`Graph::batch_norm`] in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, geo: ConvGeometry },
    Softmax { input: Var, axis: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Relu(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    ActQuant { input: Var, bits: u32 },
    SteQuant { input: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ShortcutPad { input: Var, stride: usize, pad_lo: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &ta, &tb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    /// `[n, k] x [k, p] -> [n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * p];
        kernels::gemm(n, k, p, 1.0, self.value(a).data(), k, 1, self.value(b).data(), p, 1, 0.0, &mut out, p);
        let t = Tensor::new(vec![n, p], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        let out = kernels::conv2d_forward(&geo, self.value(input).data(), self.value(weight).data());
        let t = Tensor::new(geo.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, geo }, &[input, weight]))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::softmax(self.value(input).data(), outer, len, inner);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { input, axis }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let t = Tensor::scalar(self.value(input).sum());
        self.push(t, Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len().max(1) as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::SumAxis { input, axis }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(input), &[input]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let b = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(input, &[b, rest])
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || shape[2] < kernel || shape[3] < kernel || kernel == 0 || stride == 0 {
            return Err(Error::shape("max_pool2d", format!("kernel {kernel} stride {stride} on {shape:?}")));
        }
        let (out, argmax, oshape) = kernels::max_pool2d(self.value(input).data(), &shape, kernel, stride);
        let t = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected 4-d input, got {shape:?}")));
        }
        let out = kernels::global_avg_pool(self.value(input).data(), shape[2] * shape[3]);
        let t = Tensor::new(vec![shape[0], shape[1]], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input).map(|x| x.max(0.0));
        self.push(t, Op::Relu(input), &[input])
    }

    /// Channel-wise normalization over axis 1 followed by the affine `gamma, beta`.
    ///
    /// With `fixed = None` the batch statistics are used (and returned);
    /// otherwise the supplied `(mean, var)` pair is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        fixed: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<ChannelStats>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("expected [B, C, ...], got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine shapes {:?}/{:?} do not match {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (outer, _, inner) = kernels::axis_split(&shape, 1);
        let count = outer * inner;
        let x = self.value(input).data();
        let (mean, var, stats) = match fixed {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats sized {} for {c} channels", m.len())));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        s += x[(o * c + ch) * inner..(o * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    mean[ch] = s / count as f64;
                    let mut ss = 0.0;
                    for o in 0..outer {
                        for &xi in &x[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                            let d = xi - mean[ch];
                            ss += d * d;
                        }
                    }
                    var[ch] = ss / count as f64;
                }
                let stats = ChannelStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let batch_stats = stats.is_some();
        let v = self.push(t, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats }, &[input, gamma, beta]);
        Ok((v, stats))
    }

    /// DoReFa activation quantizer with a clipped straight-through gradient.
    pub fn act_quantize(&mut self, input: Var, bits: u32) -> Result<Var> {
        let t = quant::act_quantize(self.value(input), bits)?;
        Ok(self.push(t, Op::ActQuant { input, bits }, &[input]))
    }

    /// Hard weight quantization `Q(x)` with the clipped straight-through estimator.
    pub fn ste_quantize(&mut self, input: Var, grid: &QuantGrid) -> Var {
        let t = grid.quantize(self.value(input));
        self.push(t, Op::SteQuant { input }, &[input])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} for {} labels", labels.len()),
            ));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax(self.value(logits).data(), b, k, 1);
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride` and
    /// symmetric zero padding of the channel axis up to `out_channels`.
    pub fn shortcut_pad(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || out_channels < s[1] || stride == 0 {
            return Err(Error::shape("shortcut_pad", format!("{s:?} -> {out_channels} channels, stride {stride}")));
        }
        let (out, oshape, pad_lo) = kernels::shortcut_pad(self.value(input).data(), &s, stride, out_channels);
        let t = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(t, Op::ShortcutPad { input, stride, pad_lo }, &[input]))
    }

    /// Populates gradients of every node reachable from `loss` that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if !shape.iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gy);
            }
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, gy: &Tensor) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to_shape(gy, val(*a).shape())));
                out.push((*b, reduce_to_shape(gy, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to_shape(gy, val(*a).shape())));
                out.push((*b, reduce_to_shape(&gy.map(|x| -x), val(*b).shape())));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let os = gy.shape();
                let (sa, sb) = (broadcast_strides(ta.shape(), os), broadcast_strides(tb.shape(), os));
                let (mut ga, mut gb) = (vec![0.0; gy.len()], vec![0.0; gy.len()]);
                let (da, db, g) = (ta.data(), tb.data(), gy.data());
                for_each_broadcast(os, &sa, &sb, |f, ia, ib| {
                    ga[f] = g[f] * db[ib];
                    gb[f] = g[f] * da[ia];
                });
                let ga = Tensor::new(os.to_vec(), ga).expect("shape");
                let gb = Tensor::new(os.to_vec(), gb).expect("shape");
                out.push((*a, reduce_to_shape(&ga, ta.shape())));
                out.push((*b, reduce_to_shape(&gb, tb.shape())));
            }
            Op::Scale(a, f) => out.push((*a, gy.map(|x| x * f))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if nodes[a.0].requires_grad {
                    // gA = gY · Bᵀ
                    let mut g = vec![0.0; n * k];
                    kernels::gemm(n, p, k, 1.0, gy.data(), p, 1, tb.data(), 1, p, 0.0, &mut g, k);
                    out.push((*a, Tensor::new(vec![n, k], g).expect("shape")));
                }
                if nodes[b.0].requires_grad {
                    // gB = Aᵀ · gY
                    let mut g = vec![0.0; k * p];
                    kernels::gemm(k, n, p, 1.0, ta.data(), 1, k, gy.data(), p, 1, 0.0, &mut g, p);
                    out.push((*b, Tensor::new(vec![k, p], g).expect("shape")));
                }
            }
            Op::Conv2d { input, weight, geo } => {
                let (gin, gw) = kernels::conv2d_backward(
                    geo,
                    val(*input).data(),
                    val(*weight).data(),
                    gy.data(),
                    nodes[input.0].requires_grad,
                    nodes[weight.0].requires_grad,
                );
                if let Some(g) = gin {
                    out.push((*input, Tensor::new(val(*input).shape().to_vec(), g).expect("shape")));
                }
                if let Some(g) = gw {
                    out.push((*weight, Tensor::new(val(*weight).shape().to_vec(), g).expect("shape")));
                }
            }
            Op::Softmax { input, axis } => {
                let y = nodes[i].value.data();
                let (outer, len, inner) = kernels::axis_split(nodes[i].value.shape(), *axis);
                let g = gy.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + q;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*input, Tensor::new(nodes[i].value.shape().to_vec(), gx).expect("shape")));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape().to_vec(), gy.item()))),
            Op::SumAxis { input, axis } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let g = gy.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*input, Tensor::new(shape.to_vec(), gx).expect("shape")));
            }
            Op::Reshape(a) => {
                out.push((*a, gy.clone().reshape(val(*a).shape().to_vec()).expect("shape")));
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = Tensor::zeros(val(*input).shape().to_vec());
                let d = gx.data_mut();
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    d[src] += g;
                }
                out.push((*input, gx));
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape();
                let hw = shape[2] * shape[3];
                let mut gx = Vec::with_capacity(val(*a).len());
                for &g in gy.data() {
                    gx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                out.push((*a, Tensor::new(shape.to_vec(), gx).expect("shape")));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let gx = x.zip_map(gy, |x, g| if x > 0.0 { g } else { 0.0 }).expect("shape");
                out.push((*a, gx));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = val(*input).shape();
                let c = shape[1];
                let (outer, _, inner) = kernels::axis_split(shape, 1);
                let n = (outer * inner) as f64;
                let g = gy.data();
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if nodes[input.0].requires_grad {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + inner {
                                gx[j] = if *batch_stats {
                                    k * (g[j] - sum_g[ch] / n - xhat[j] * sum_gx[ch] / n)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    out.push((*input, Tensor::new(shape.to_vec(), gx).expect("shape")));
                }
                out.push((*gamma, Tensor::new(vec![c], sum_gx).expect("shape")));
                out.push((*beta, Tensor::new(vec![c], sum_g).expect("shape")));
            }
            Op::ActQuant { input, bits } => {
                let x = val(*input);
                let gx = if *bits >= 32 {
                    gy.clone()
                } else {
                    x.zip_map(gy, |x, g| if (0.0..=1.0).contains(&x) { g } else { 0.0 }).expect("shape")
                };
                out.push((*input, gx));
            }
            Op::SteQuant { input } => {
                out.push((*input, quant::ste_backward(gy, val(*input)).expect("shape")));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = gy.item() / labels.len() as f64;
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(val(*logits).shape().to_vec(), gx).expect("shape")));
            }
            Op::ShortcutPad { input, stride, pad_lo } => {
                let s = val(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = gy.shape();
                let (oc, oh, ow) = (os[1], os[2], os[3]);
                let g = gy.data();
                let mut gx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[((bi * c + ci) * h + y * stride) * w + xx * stride] =
                                    g[((bi * oc + ci + pad_lo) * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                out.push((*input, Tensor::new(s.to_vec(), gx).expect("shape")));
            }
        }
        for (v, g) in out {
            if self.wants(v) {
                self.accumulate(v, g);
            }
        }
    }
}
