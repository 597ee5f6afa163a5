//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node holding its
//! output value plus whatever it needs to run backward. [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates gradients into the
//! `grad` slot of every leaf created with `requires_grad`. Build a fresh
//! graph per training step and drop it afterwards.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, MatRef, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch norm behaviour.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and (biased) variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one train-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, which is what running statistics track.
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in running_var.iter_mut().zip(&self.var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeom, out_ch: usize, cols: Vec<T> },
    ConvT { x: Var, k: Var, geom: ConvGeom, in_ch: usize, x_cn: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    ChannelBias { x: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Bce { p: Var, targets: Vec<T>, eps: T },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probability clamp used inside `bce_loss`.
pub const BCE_EPS: f64 = 1e-7;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, axis extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Channel count and per-channel spatial size of an `[N, C]` or `[N, C, H, W]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Shape(format!("expected [N,C] or [N,C,H,W], got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        if requires_grad && tensor.grad.is_none() {
            tensor.grad = Some(vec![T::zero(); tensor.numel()]);
        }
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Leaf tracking gradients.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if let Some(i) = self.nodes[v.0].value.first_non_finite() {
            return Err(Error::NonFinite(format!("{what} output at flat index {i}")));
        }
        Ok(())
    }

    // ---- convolution -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (&[n, c, h, w], &[o, ki, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::Shape(format!("conv2d expects NCHW input and OIKK kernel, got {xs:?} and {ks:?}")));
        };
        if ki != c {
            return Err(Error::Shape(format!("conv2d channel mismatch: input axis 1 = {c}, kernel axis 1 = {ki}")));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, axes 2,3 = {kh}x{kw}")));
        }
        let geom = ConvGeom { n, c, h, w, k: kh, stride, pad };
        geom.validate()?;
        let (ho, wo) = geom.out_hw();
        let (y, cols) = conv::conv2d_forward(self.value(x).data(), &geom, self.value(k).data(), o);
        let out = Tensor::new(&[n, o, ho, wo], y)?;
        Ok(self.push(out, Op::Conv2d { x, k, geom, out_ch: o, cols }, &[x, k]))
    }

    /// Kernel layout `[in, out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (&[n, c, h, w], &[ki, o, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::Shape(format!(
                "conv_transpose2d expects NCHW input and [in,out,k,k] kernel, got {xs:?} and {ks:?}"
            )));
        };
        if ki != c {
            return Err(Error::Shape(format!("conv_transpose2d channel mismatch: input axis 1 = {c}, kernel axis 0 = {ki}")));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv_transpose2d kernel must be square, axes 2,3 = {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let geom = conv::transpose_geom(n, o, h, w, kh, stride, pad)?;
        let (y, x_cn) = conv::conv_transpose2d_forward(self.value(x).data(), c, &geom, self.value(k).data());
        let out = Tensor::new(&[n, o, geom.h, geom.w], y)?;
        Ok(self.push(out, Op::ConvT { x, k, geom, in_ch: c, x_cn }, &[x, k]))
    }

    // ---- normalization -----------------------------------------------

    /// Batch normalization over `[N, C]` or `[N, C, H, W]` inputs.
    /// Train mode also returns the batch statistics for running-stat updates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = channel_layout(&shape)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("batchnorm affine params must have {c} entries (axis 1)")));
        }
        let xv = self.value(x).data();
        let count = n * hw;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        s += xv[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        sq += xv[base..base + hw].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = T::from_f64(m);
                    var[ch] = T::from_f64(sq / count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| T::from_f64(v.as_f64() * count as f64 / (count as f64 - 1.0).max(1.0)))
                    .collect();
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("running stats must have {c} entries")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(&shape, y)?;
        let batch_stats = stats.is_some();
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    // ---- pointwise ---------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && self.value(b).numel() != 1 {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ (only scalar rhs broadcasts)")));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let bv = self.value(b).data();
        let out = if bv.len() == 1 {
            let s = bv[0];
            self.value(a).map(|v| v + s)
        } else {
            let mut t = self.value(a).clone();
            t.grad = None;
            t.requires_grad = false;
            t.data_mut().iter_mut().zip(bv).for_each(|(x, &y)| *x = *x + y);
            t
        };
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let bv = self.value(b).data();
        let out = if bv.len() == 1 {
            let s = bv[0];
            self.value(a).map(|v| v * s)
        } else {
            let av = self.value(a);
            Tensor::new(av.shape(), av.data().iter().zip(bv).map(|(&x, &y)| x * y).collect())?
        };
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    /// Adds `b[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = channel_layout(&shape)?;
        if self.value(b).numel() != c {
            return Err(Error::Shape(format!("bias has {} entries, axis 1 has {c}", self.value(b).numel())));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).map(|v| v);
        let d = out.data_mut();
        for bi in 0..n {
            for (ch, &bias) in bv.iter().enumerate() {
                let base = (bi * c + ch) * hw;
                d[base..base + hw].iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        Ok(self.push(out, Op::ChannelBias { x, b }, &[x, b]))
    }

    // ---- shape -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::Shape(format!("concat on axis {axis}: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        let out = t.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!("narrow axis {axis} range {start}..{} on {shape:?}", start + len)));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * ext + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let out = Tensor::new(&new_shape, data)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    // ---- dense -------------------------------------------------------

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `x w^T + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, fin], &[fout, win]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::Shape(format!("dense expects [N,in] x [out,in], got {xs:?} and {ws:?}")));
        };
        if fin != win {
            return Err(Error::Shape(format!("dense: input axis 1 = {fin}, weight axis 1 = {win}")));
        }
        let mut y = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(Error::Shape(format!("dense bias has {} entries, expected {fout}", bv.len())));
            }
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        matmul_into(
            MatRef::new(self.value(x).data(), n, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            T::one(),
            &mut y,
        );
        let out = Tensor::new(&[n, fout], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Dense { x, w, b }, &inputs))
    }

    // ---- losses ------------------------------------------------------

    /// Mean binary cross-entropy, probabilities clamped to `[1e-7, 1 - 1e-7]`.
    /// `targets` has one entry per element of `p` (or a single broadcast entry).
    pub fn bce_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(p).numel();
        let targets: Vec<T> = match targets.len() {
            1 => vec![T::from_f64(targets[0]); n],
            l if l == n => targets.iter().map(|&t| T::from_f64(t)).collect(),
            l => return Err(Error::Shape(format!("bce: {l} targets for {n} probabilities"))),
        };
        let eps = T::from_f64(BCE_EPS);
        let loss = bce_value(self.value(p).data(), &targets, eps);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, targets, eps }, &[p]))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[n, k] = shape.as_slice() else {
            return Err(Error::Shape(format!("softmax_cross_entropy expects [N,K], got {shape:?}")));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!("labels must be {n} indices below {k}")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * k + l].as_f64().max(1e-30).ln();
        }
        let out = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(out, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    // ---- backward ----------------------------------------------------

    /// Backpropagate from a scalar `loss`, accumulating into leaf grads.
    /// Calling it twice without zeroing leaf grads adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, gy, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, gy: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        if matches!(self.nodes[id].op, Op::Leaf) {
            let slot = self.nodes[id].value.grad.get_or_insert_with(|| vec![T::zero(); gy.len()]);
            slot.iter_mut().zip(&gy).for_each(|(e, &g)| *e = *e + g);
            return Ok(());
        }
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let acc = |v: Var, g: Vec<T>, grads: &mut [Option<Vec<T>>]| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &x)| *e = *e + x),
            slot @ None => *slot = Some(g),
        };
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => unreachable!("leaves return early"),
            Op::Conv2d { x, k, geom, out_ch, cols } => {
                let (dx, dk) = conv::conv2d_backward(&gy, cols, geom, nodes[k.0].value.data(), *out_ch, needs(x), needs(k));
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                if let Some(dk) = dk {
                    acc(*k, dk, grads);
                }
            }
            Op::ConvT { x, k, geom, in_ch, x_cn } => {
                let (dx, dk) =
                    conv::conv_transpose2d_backward(&gy, x_cn, *in_ch, geom, nodes[k.0].value.data(), needs(x), needs(k));
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                if let Some(dk) = dk {
                    acc(*k, dk, grads);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, hw) = channel_layout(node.value.shape())?;
                let g = nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] = dgamma[ch] + gy[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gy[i];
                        }
                    }
                }
                if needs(x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = T::from_f64((n * hw) as f64);
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale * (gy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    scale * gy[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx, grads);
                }
                if needs(gamma) {
                    acc(*gamma, dgamma, grads);
                }
                if needs(beta) {
                    acc(*beta, dbeta, grads);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = nodes[x.0].value.data();
                let dx = gy.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }).collect();
                acc(*x, dx, grads);
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = gy.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                acc(*x, dx, grads);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = gy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                acc(*x, dx, grads);
            }
            Op::Add { a, b } => {
                if needs(b) {
                    let db = if nodes[b.0].value.numel() == 1 && gy.len() != 1 {
                        vec![gy.iter().fold(T::zero(), |s, &g| s + g)]
                    } else {
                        gy.clone()
                    };
                    acc(*b, db, grads);
                }
                if needs(a) {
                    acc(*a, gy, grads);
                }
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if needs(b) {
                    let db = if bv.len() == 1 && gy.len() != 1 {
                        vec![gy.iter().zip(av).fold(T::zero(), |s, (&g, &x)| s + g * x)]
                    } else {
                        gy.iter().zip(av).map(|(&g, &x)| g * x).collect()
                    };
                    acc(*b, db, grads);
                }
                if needs(a) {
                    let da = if bv.len() == 1 {
                        gy.iter().map(|&g| g * bv[0]).collect()
                    } else {
                        gy.iter().zip(bv).map(|(&g, &y)| g * y).collect()
                    };
                    acc(*a, da, grads);
                }
            }
            Op::Scale { x, s } => {
                acc(*x, gy.iter().map(|&g| g * *s).collect(), grads);
            }
            Op::ChannelBias { x, b } => {
                let (n, c, hw) = channel_layout(node.value.shape())?;
                if needs(b) {
                    let mut db = vec![T::zero(); c];
                    for bi in 0..n {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let base = (bi * c + ch) * hw;
                            *d = gy[base..base + hw].iter().fold(*d, |s, &g| s + g);
                        }
                    }
                    acc(*b, db, grads);
                }
                if needs(x) {
                    acc(*x, gy, grads);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total_chunk = node.value.shape()[*axis] * inner;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    if needs(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * total_chunk + offset;
                            dp.extend_from_slice(&gy[s..s + chunk]);
                        }
                        acc(*p, dp, grads);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape { x } => acc(*x, gy, grads),
            Op::Narrow { x, axis, start } => {
                let src_shape = nodes[x.0].value.shape();
                let (outer, ext, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                acc(*x, dx, grads);
            }
            Op::Sum { x } => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![gy[0]; n], grads);
            }
            Op::Mean { x } => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![gy[0] / T::from_f64(n as f64); n], grads);
            }
            Op::Dense { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = node.value.shape()[1];
                if needs(w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    matmul_into(MatRef::new(&gy, n, fout).t(), MatRef::new(nodes[x.0].value.data(), n, fin), T::zero(), &mut dw);
                    acc(*w, dw, grads);
                }
                if let Some(b) = b.filter(|b| needs(b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in gy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                    acc(b, db, grads);
                }
                if needs(x) {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul_into(MatRef::new(&gy, n, fout), MatRef::new(nodes[w.0].value.data(), fout, fin), T::zero(), &mut dx);
                    acc(*x, dx, grads);
                }
            }
            Op::Bce { p, targets, eps } => {
                let pv = nodes[p.0].value.data();
                let n = T::from_f64(pv.len() as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                let dp = pv
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        let pc = p.max(lo).min(hi);
                        gy[0] * (-(t / pc) + (T::one() - t) / (T::one() - pc)) / n
                    })
                    .collect();
                acc(*p, dp, grads);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = node_k(nodes[logits.0].value.shape());
                let n = T::from_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * gy[0] / n);
                acc(*logits, d, grads);
            }
        }
        Ok(())
    }

    /// Fails with `NonFinite` if the value of `v` holds NaN or infinity.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        self.check_finite(v, what)
    }
}

fn node_k(shape: &[usize]) -> usize {
    shape[1]
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            s = s + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / s);
    }
    out
}

fn bce_value<T: Scalar>(p: &[T], t: &[T], eps: T) -> T {
    let lo = eps;
    let hi = T::one() - eps;
    let mut s = 0.0f64;
    for (&p, &t) in p.iter().zip(t) {
        let pc = p.max(lo).min(hi).as_f64();
        let t = t.as_f64();
        s -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    T::from_f64(s / p.len() as f64)
}

/// Maximum relative error between the autodiff gradient of scalar `f` at `x`
/// and central differences with step `h`:
/// `max_i |a_i - d_i| / max(|a_i|, |d_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let th = g.tanh(z);
        assert_eq!(g.value(th).item(), 0.0);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let m2 = g.constant(t(&[1], &[-2.0]));
        let l = g.leaky_relu(m2, 0.2);
        assert_abs_diff_eq!(g.value(l).item(), -0.4, epsilon = 1e-15);
        let r = g.relu(m2);
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-30.0, 0.0, 30.0]));
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let b = g.constant(Tensor::ones(&[2, 3, 4, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 4, 4]);
        let bad = g.constant(Tensor::zeros(&[2, 3, 5, 4]));
        assert!(matches!(g.concat(&[a, bad], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[4], &[0.5; 4]));
        let l = g.bce_loss(p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-12);
        let p = g.constant(t(&[1], &[0.9]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.10536051565782628, epsilon = 1e-12);
        let p = g.constant(t(&[2], &[1.0, 0.0]));
        let l = g.bce_loss(p, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).item() <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let x = t(&[5], &[1.0, -2.0, 0.5, 3.0, -0.25]);
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(v).unwrap(), expected.as_slice());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let z = g.scale(v, 0.0);
        let c = g.constant(t(&[1], &[4.0]));
        let s = g.sum(z);
        let f = g.add(s, c).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_accumulates() {
        let mut g = Graph::new();
        let v = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_train_mode() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.batchnorm2d(x, gamma, beta, 1e-5, BnMode::Train), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn narrow_picks_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = g.narrow(x, 0, 1, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 4.0, 5.0]);
        let z = g.narrow(x, 1, 1, 1).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 3.0, 5.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_ce_gradcheck() {
        let x = Tensor::from_fn(&[3, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let err = grad_check(|g, v| g.softmax_cross_entropy(v, &[0, 3, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
