//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended after their inputs, so creation order is a topological order
//! and [`Graph::backward`] simply walks the tape from the loss back to the
//! start, visiting each node once.

use super::conv::{self, ConvDims, ConvGeometry};
use super::gemm::{gemm, MatRef};
use super::{lit, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Shift(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    ChannelMask {
        x: Var,
        mask: Vec<T>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Statistics used by [`Graph::batch_norm2d`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize by the current batch (training).
    Batch { eps: T },
    /// Normalize by stored running statistics (evaluation).
    Running {
        mean: &'a [T],
        var: &'a [T],
        eps: T,
    },
}

/// Per-channel batch mean and biased variance observed by a training-mode
/// batch normalization.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor<T>> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.to_vec()))
    }

    /// Adds the gradient of `var` into `target`'s accumulated gradient.
    /// A leaf that received no gradient contributes nothing.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Clamped binary cross-entropy of one probability.
pub(crate) fn bce_prob_term(p: f64, y: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Clamped binary cross-entropy of `sigmoid(logit)`, evaluated without
/// forming the probability.
pub(crate) fn bce_logit_term(logit: f64, y: f64) -> f64 {
    // `max` would turn a NaN logit into the clamp floor
    if logit.is_nan() {
        return f64::NAN;
    }
    let floor = PROB_CLAMP.ln();
    let log_p = (-softplus(-logit)).max(floor);
    let log_q = (-softplus(logit)).max(floor);
    -(y * log_p + (1.0 - y) * log_q)
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

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert!(
            !matches!(op, Op::Leaf) || !requires_grad || value.grad().is_none(),
            "leaf values are stored detached"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf. It takes part in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.detached(), t.requires_grad(), Op::Leaf)
    }

    /// Records a value that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        };
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    /// `a + b`; `b` may be a one-element tensor broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, rg, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, negative_slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, negative_slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * negative_slope
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `y = x W^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let (batch, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![T::zero(); batch * fout];
        gemm(
            T::one(),
            MatRef::row_major(vx.data(), batch, fin),
            MatRef::row_major(vw.data(), fout, fin).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [fout] {
                return Err(Error::shape("linear bias", vb.shape(), &[fout]));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(vb.data()).for_each(|(y, &c)| *y = *y + c);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![batch, fout], out);
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        transpose: bool,
    ) -> Result<ConvDims> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 {
            return Err(Error::shape(op, vx.shape(), vw.shape()));
        }
        let [batch, c_in, in_h, in_w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (w_in, c_out) = if transpose {
            (vw.shape()[0], vw.shape()[1])
        } else {
            (vw.shape()[1], vw.shape()[0])
        };
        if w_in != c_in || vw.shape()[2] != geo.kernel || vw.shape()[3] != geo.kernel {
            return Err(Error::shape(op, vx.shape(), vw.shape()));
        }
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [c_out] {
                return Err(Error::shape(op, vb.shape(), &[c_out]));
            }
        }
        let extent = |e: usize| {
            if transpose {
                geo.transpose_output(e)
            } else {
                geo.conv_output(e)
            }
        };
        let (out_h, out_w) = match (extent(in_h), extent(in_w)) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
            _ => {
                return Err(Error::geometry(
                    op,
                    format!("input {in_h}x{in_w} with {geo:?} gives an empty output"),
                ))
            }
        };
        Ok(ConvDims {
            batch,
            c_in,
            c_out,
            in_h,
            in_w,
            out_h,
            out_w,
            geo,
        })
    }

    /// Cross-correlation. `x: [b, c_in, h, w]`, `w: [c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims("conv2d", x, w, b, geo, false)?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![dims.batch, dims.c_out, dims.out_h, dims.out_w], out);
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, dims }))
    }

    /// Adjoint of [`Graph::conv2d`]. `x: [b, c_in, h, w]`, `w: [c_in, c_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let dims = self.conv_dims("conv_transpose2d", x, w, b, geo, true)?;
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![dims.batch, dims.c_out, dims.out_h, dims.out_w], out);
        Ok(self.push(value, rg, Op::ConvTranspose2d { x, w, b, dims }))
    }

    /// Per-channel normalization of `x: [b, c, h, w]` followed by the affine
    /// map `gamma * x_hat + beta`. With [`NormStats::Batch`] the observed
    /// moments are returned for running-statistic updates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Error::invalid(format!(
                "batch_norm2d expects [b, c, h, w], got {:?}",
                vx.shape()
            )));
        }
        let (batch, channels) = (vx.shape()[0], vx.shape()[1]);
        let plane = vx.shape()[2] * vx.shape()[3];
        for p in [gamma, beta] {
            if self.value(p).shape() != [channels] {
                return Err(Error::shape("batch_norm2d", self.value(p).shape(), &[channels]));
            }
        }
        let data = vx.data();
        let count = batch * plane;
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                if batch < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d in training mode needs a batch of at least 2",
                    ));
                }
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let values = (0..batch)
                        .flat_map(|b| data[(b * channels + c) * plane..][..plane].iter());
                    let m = values.clone().map(|v| v.as_f64()).sum::<f64>() / count as f64;
                    let v = values.map(|x| (x.as_f64() - m).powi(2)).sum::<f64>() / count as f64;
                    mean[c] = lit(m);
                    var[c] = lit(v);
                }
                (mean, var, eps, true)
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape("batch_norm2d running stats", &[mean.len()], &[channels]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * plane;
                for i in start..start + plane {
                    let h = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, moments))
    }

    /// Multiplies each `(sample, channel)` plane of `x: [b, c, ...]` by
    /// `mask[b * c + channel]`.
    pub fn channel_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() < 2 || mask.len() != vx.shape()[0] * vx.shape()[1] {
            return Err(Error::shape("channel_mask", vx.shape(), &[mask.len()]));
        }
        let plane = vx.numel() / mask.len();
        let data: Vec<T> = vx
            .data()
            .chunks(plane)
            .zip(&mask)
            .flat_map(|(chunk, &m)| chunk.iter().map(move |&v| v * m))
            .collect();
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::ChannelMask { x, mask }))
    }

    fn check_targets(&self, op: &'static str, v: Var, targets: &[T]) -> Result<()> {
        let n = self.value(v).numel();
        if n != targets.len() {
            return Err(Error::shape(op, self.value(v).shape(), &[targets.len()]));
        }
        Ok(())
    }

    /// Mean binary cross-entropy of probabilities against `targets`, with
    /// the probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        self.check_targets("bce", probs, targets)?;
        let p = self.value(probs).data();
        let total: f64 = p
            .iter()
            .zip(targets)
            .map(|(&p, &y)| bce_prob_term(p.as_f64(), y.as_f64()))
            .sum();
        let value = Tensor::scalar(lit(total / targets.len() as f64));
        let rg = self.rg(probs);
        Ok(self.push(
            value,
            rg,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy of `sigmoid(logits)` with the same clamp as
    /// [`Graph::bce`], computed in log space so it never takes `log(0)`.
    /// The gradient is the unclamped `(sigmoid(l) - y) / n`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        self.check_targets("bce_with_logits", logits, targets)?;
        let l = self.value(logits).data();
        let total: f64 = l
            .iter()
            .zip(targets)
            .map(|(&l, &y)| bce_logit_term(l.as_f64(), y.as_f64()))
            .sum();
        let value = Tensor::scalar(lit(total / targets.len() as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. Contributions from repeated uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Accumulation buffer for `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if let Some(s) = self.slot(grads, v) {
            s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
    }

    /// Gradient flowing into a possibly broadcast second operand.
    fn add_broadcast(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T> + Clone) {
        if let Some(s) = self.slot(grads, v) {
            if s.len() == 1 {
                s[0] = s[0] + g.sum::<T>();
            } else {
                s.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_broadcast(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                self.add_broadcast(grads, *b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    if vb.len() == 1 {
                        s.iter_mut().zip(g).for_each(|(acc, &gi)| *acc = *acc + gi * vb[0]);
                    } else {
                        for ((acc, &gi), &y) in s.iter_mut().zip(g).zip(vb) {
                            *acc = *acc + gi * y;
                        }
                    }
                }
                self.add_broadcast(grads, *b, g.iter().zip(va).map(|(&gi, &x)| gi * x));
            }
            Op::Neg(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(acc, &gi)| *acc = *acc - gi);
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(acc, &gi)| *acc = *acc + gi * *c);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => self.add_into(grads, *a, g),
            Op::Sum(a) | Op::Mean(a) => {
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / lit::<T>(self.value(*a).numel() as f64)
                } else {
                    g[0]
                };
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|acc| *acc = *acc + scale);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *acc = *acc + gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        *acc = *acc + if xi > T::zero() { gi } else { gi * *slope };
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *acc = *acc + gi * (T::one() - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *acc = *acc + gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                let gm = MatRef::row_major(g, batch, fout);
                if let Some(s) = self.slot(grads, *x) {
                    gemm(T::one(), gm, MatRef::row_major(vw.data(), fout, fin), T::one(), s);
                }
                if let Some(s) = self.slot(grads, *w) {
                    gemm(T::one(), gm.t(), MatRef::row_major(vx.data(), batch, fin), T::one(), s);
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, *b) {
                        for row in g.chunks(fout) {
                            s.iter_mut().zip(row).for_each(|(acc, &gi)| *acc = *acc + gi);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } | Op::ConvTranspose2d { x, w, b, dims } => {
                let need = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let run = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward
                } else {
                    conv::conv_transpose2d_backward
                };
                let out = run(val(*x), val(*w), g, dims, need);
                if let Some(dx) = out.input {
                    self.add_into(grads, *x, &dx);
                }
                if let Some(dw) = out.weight {
                    self.add_into(grads, *w, &dw);
                }
                if let (Some(b), Some(db)) = (b, out.bias) {
                    self.add_into(grads, *b, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (batch, channels) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                let count = lit::<T>((batch * plane) as f64);
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let start = (b * channels + c) * plane;
                        for i in start..start + plane {
                            sum_g[c] = sum_g[c] + g[i];
                            sum_gx[c] = sum_gx[c] + g[i] * xhat[i];
                        }
                    }
                }
                let gam = val(*gamma);
                if let Some(s) = self.slot(grads, *x) {
                    for b in 0..batch {
                        for c in 0..channels {
                            let k = gam[c] * inv_std[c];
                            let start = (b * channels + c) * plane;
                            for i in start..start + plane {
                                let d = if *batch_stats {
                                    k * (g[i] - (sum_g[c] + xhat[i] * sum_gx[c]) / count)
                                } else {
                                    k * g[i]
                                };
                                s[i] = s[i] + d;
                            }
                        }
                    }
                }
                self.add_into(grads, *gamma, &sum_gx);
                self.add_into(grads, *beta, &sum_g);
            }
            Op::ChannelMask { x, mask } => {
                let plane = g.len() / mask.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (i, (acc, &gi)) in s.iter_mut().zip(g).enumerate() {
                        *acc = *acc + gi * mask[i / plane];
                    }
                }
            }
            Op::Bce { probs, targets } => {
                let p = val(*probs);
                let n = lit::<T>(targets.len() as f64);
                let (lo, hi) = (lit::<T>(PROB_CLAMP), lit::<T>(1.0 - PROB_CLAMP));
                if let Some(s) = self.slot(grads, *probs) {
                    for ((acc, &pi), &y) in s.iter_mut().zip(p).zip(targets) {
                        if pi < lo || pi > hi {
                            continue;
                        }
                        let d = -(y / pi) + (T::one() - y) / (T::one() - pi);
                        *acc = *acc + g[0] * d / n;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let l = val(*logits);
                let n = lit::<T>(targets.len() as f64);
                if let Some(s) = self.slot(grads, *logits) {
                    for ((acc, &li), &y) in s.iter_mut().zip(l).zip(targets) {
                        *acc = *acc + g[0] * (sigmoid(li) - y) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.sub(a, a).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
        let c = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        match g.add(a, c) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x = t(&[3], &[1.5, -2.0, 0.25]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let s = g.sum(v);
        assert_eq!(g.backward(s).unwrap().get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let v = g.leaf(&x);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        assert_eq!(g.backward(half).unwrap().get(v).unwrap(), x.data());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let a = g.leaf(&x);
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[5.0, 6.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true);
        let k = Tensor::scalar(2.0).with_requires_grad(true);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(&x), g.leaf(&k));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[6.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(t(&[3, 3], &eye));
        let b = g.constant(Tensor::zeros([3]).unwrap());
        let y = g.linear(xv, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), x.data());
        let bad = g.constant(Tensor::zeros([3, 4]).unwrap());
        assert!(g.linear(xv, bad, None).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = g.constant(t(&[2], &[0.9, 0.1]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item().unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        let z = g.constant(t(&[1], &[0.0]));
        let l = g.bce_with_logits(z, &[1.0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_is_bounded_by_clamp() {
        let bound = -(PROB_CLAMP.ln());
        for &(l, y) in &[(1e4, 0.0), (-1e4, 1.0), (50.0, 0.0), (0.0, 1.0)] {
            let v = bce_logit_term(l, y);
            assert!((0.0..=bound + 1e-12).contains(&v), "{l} {y} -> {v}");
        }
        assert!(bce_prob_term(0.0, 1.0) <= bound + 1e-12);
        assert!(bce_prob_term(1.0 - 1e-7, 1.0) < 1.01e-7);
    }

    #[test]
    fn bce_propagates_nan() {
        assert!(bce_logit_term(f64::NAN, 1.0).is_nan());
        assert!(bce_prob_term(f64::NAN, 0.0).is_nan());
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::new([2], vec![0.5, f32::NAN]).unwrap());
        let loss = g.bce_with_logits(l, &[1.0, 0.0]).unwrap();
        assert!(g.value(loss).item().unwrap().is_nan());
    }
}
