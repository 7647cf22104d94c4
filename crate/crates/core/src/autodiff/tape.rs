//! Flat reverse-mode tape over dense 2-D tensors.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward rule. Node ids are assigned in execution order, so
//! the tape is already topologically sorted and `backward` simply walks it in
//! reverse, accumulating into per-node gradient buffers.

use super::batchnorm::{BatchStats, BnMode};
use super::scalar::{gemm, Transpose};
use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Softplus {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    ConcatBroadcast {
        tokens: NodeId,
        global: NodeId,
        group: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        grad: Vec<T>,
    },
    /// Scalar computed outside the tape with known partial derivatives.
    Custom {
        inputs: Vec<(NodeId, Tensor<T>)>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<T>,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    #[cfg(test)]
    pub(crate) fn force_requires_grad(&mut self, id: NodeId) {
        self.nodes[id].requires_grad = true;
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Parameter or input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// `y = x @ w + b` with `x: [R, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        ensure!(wv.shape().len() == 2, "linear weight must be 2-D, got {:?}", wv.shape());
        let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
        ensure!(
            xv.cols() == fan_in,
            "linear input width {} does not match weight {:?}",
            xv.cols(),
            wv.shape()
        );
        ensure!(bv.len() == fan_out, "linear bias has {} entries, expected {}", bv.len(), fan_out);
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        gemm(rows, fan_in, fan_out, xv.data(), wv.data(), &mut out, Transpose::None, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![rows, fan_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.shape() == bv.shape(), "add: shapes {:?} and {:?}", av.shape(), bv.shape());
        let mut value = av.clone();
        value.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus { x }, rg)
    }

    /// Per-channel normalization over all rows of `x: [R, C]`.
    ///
    /// Returns the batch statistics when `mode` uses them; folding them into
    /// running statistics is the caller's job. In `Eval` mode the provided
    /// running statistics normalize the input.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            "batchnorm affine parameters do not match {} channels",
            c
        );
        ensure!(
            running_mean.len() == c && running_var.len() == c,
            "batchnorm running statistics do not match {} channels",
            c
        );
        let (mean, var, stats) = if mode.uses_batch_stats() {
            ensure!(rows >= 2, "batch statistics need at least 2 rows, got {}", rows);
            let n = T::of(rows as f64);
            let mut mean = vec![T::zero(); c];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                    *m = *m + v;
                }
            }
            for m in &mut mean {
                *m = *m / n;
            }
            let mut var = vec![T::zero(); c];
            for r in 0..rows {
                for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            let unbiased: Vec<T> = var.iter().map(|&s| s / (n - T::one())).collect();
            for s in &mut var {
                *s = *s / n;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(rows * c);
        let mut out = Vec::with_capacity(rows * c);
        for r in 0..rows {
            for (ch, &v) in xv.row(r).iter().enumerate() {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = mode != BnMode::AdaptStats && (self.rg(x) || self.rg(gamma) || self.rg(beta));
        if mode == BnMode::AdaptStats {
            xhat = Vec::new();
        }
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((id, stats))
    }

    /// Per-channel max over consecutive groups of `group` rows:
    /// `[G * group, C] -> [G, C]`. Ties resolve to the lowest row.
    pub fn max_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        ensure!(group >= 1 && rows % group == 0, "cannot pool {} rows in groups of {}", rows, group);
        let groups = rows / group;
        let mut out = Vec::with_capacity(groups * c);
        let mut argmax = Vec::with_capacity(groups * c);
        for gi in 0..groups {
            let base = gi * group;
            let mut best: Vec<T> = xv.row(base).to_vec();
            let mut arg = vec![base as u32; c];
            for r in base + 1..base + group {
                for ((bv, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(xv.row(r)) {
                    if v > *bv {
                        *bv = v;
                        *a = r as u32;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
        }
        let value = Tensor::new(vec![groups, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// `[tokens_i || global_{i / group}]` for `tokens: [G * group, D1]`, `global: [G, D2]`.
    pub fn concat_broadcast(&mut self, tokens: NodeId, global: NodeId, group: usize) -> Result<NodeId> {
        let (tv, gv) = (self.value(tokens), self.value(global));
        ensure!(
            group >= 1 && tv.rows() == gv.rows() * group,
            "concat_broadcast: {} token rows vs {} global rows x {}",
            tv.rows(),
            gv.rows(),
            group
        );
        let (d1, d2) = (tv.cols(), gv.cols());
        let mut out = Vec::with_capacity(tv.rows() * (d1 + d2));
        for r in 0..tv.rows() {
            out.extend_from_slice(tv.row(r));
            out.extend_from_slice(gv.row(r / group));
        }
        let value = Tensor::new(vec![tv.rows(), d1 + d2], out)?;
        let rg = self.rg(tokens) || self.rg(global);
        Ok(self.push(value, Op::ConcatBroadcast { tokens, global, group }, rg))
    }

    /// Elementwise multiply by a precomputed mask (already scaled by `1 / (1 - p)`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let xv = self.value(x);
        ensure!(mask.len() == xv.len(), "dropout mask has {} entries for {}", mask.len(), xv.len());
        let mut value = xv.clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        ensure!(labels.len() == b, "{} labels for {} rows of logits", labels.len(), b);
        let bt = T::of(b as f64);
        let mut loss = T::zero();
        let mut grad = Vec::with_capacity(b * k);
        for (i, &label) in labels.iter().enumerate() {
            ensure!(label < k, "label {} out of range for {} classes", label, k);
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            loss = loss + (lse - row[label]);
            for (j, &z) in row.iter().enumerate() {
                let p = (z - lse).exp();
                let onehot = if j == label { T::one() } else { T::zero() };
                grad.push((p - onehot) / bt);
            }
        }
        let value = Tensor::scalar(loss / bt);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, grad }, rg))
    }

    /// Records a scalar whose partial derivatives with respect to `inputs`
    /// were computed elsewhere.
    pub fn custom_scalar(&mut self, value: T, inputs: Vec<(NodeId, Tensor<T>)>) -> Result<NodeId> {
        for (id, g) in &inputs {
            ensure!(
                self.value(*id).shape() == g.shape(),
                "custom gradient shape {:?} does not match node shape {:?}",
                g.shape(),
                self.value(*id).shape()
            );
        }
        let rg = inputs.iter().any(|(id, _)| self.rg(*id));
        Ok(self.push(Tensor::scalar(value), Op::Custom { inputs }, rg))
    }

    /// `sum_i weights_i * x_i`; handy for probing primitives with a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let xv = self.value(x);
        ensure!(weights.len() == xv.len(), "{} weights for {} elements", weights.len(), xv.len());
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let mut value = self.value(x).clone();
        value.scale(factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar, node {} has shape {:?}",
            loss,
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, fan_in, fan_out) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let g = slot(grads, *x, xv.shape());
                    gemm(rows, fan_out, fan_in, dy.data(), wv.data(), g.data_mut(), Transpose::Right, true);
                }
                if self.rg(*w) {
                    let g = slot(grads, *w, wv.shape());
                    gemm(fan_in, rows, fan_out, xv.data(), dy.data(), g.data_mut(), Transpose::Left, true);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, self.value(*b).shape());
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for (a, &d) in gd.iter_mut().zip(dy.row(r)) {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &i in &[*a, *b] {
                    if self.rg(i) {
                        slot(grads, i, dy.shape()).add_assign(dy);
                    }
                }
            }
            Op::Relu { x } => {
                let g = slot(grads, *x, dy.shape()).data_mut();
                for ((a, &d), &v) in g.iter_mut().zip(dy.data()).zip(self.value(*x).data()) {
                    if v > T::zero() {
                        *a = *a + d;
                    }
                }
            }
            Op::Softplus { x } => {
                let g = slot(grads, *x, dy.shape()).data_mut();
                for ((a, &d), &v) in g.iter_mut().zip(dy.data()).zip(self.value(*x).data()) {
                    *a = *a + d * logistic(v);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                if *mode == BnMode::AdaptStats {
                    return Err(Error::ContractViolation(
                        "backward requested through a statistics-only BatchNorm pass".into(),
                    ));
                }
                let (rows, c) = (dy.rows(), dy.cols());
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for r in 0..rows {
                    let h = &xhat[r * c..(r + 1) * c];
                    for ch in 0..c {
                        let d = dy.data()[r * c + ch];
                        sum_dy[ch] = sum_dy[ch] + d;
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + d * h[ch];
                    }
                }
                if self.rg(*gamma) {
                    let g = slot(grads, *gamma, &[c]);
                    for (a, &s) in g.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *a = *a + s;
                    }
                }
                if self.rg(*beta) {
                    let g = slot(grads, *beta, &[c]);
                    for (a, &s) in g.data_mut().iter_mut().zip(&sum_dy) {
                        *a = *a + s;
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let scale: Vec<T> = (0..c).map(|ch| gam[ch] * inv_std[ch]).collect();
                    let g = slot(grads, *x, dy.shape()).data_mut();
                    if *mode == BnMode::Train {
                        let n = T::of(rows as f64);
                        let mean_dy: Vec<T> = sum_dy.iter().map(|&s| s / n).collect();
                        let mean_dyh: Vec<T> = sum_dy_xhat.iter().map(|&s| s / n).collect();
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                let d = dy.data()[i] - mean_dy[ch] - xhat[i] * mean_dyh[ch];
                                g[i] = g[i] + scale[ch] * d;
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                g[i] = g[i] + scale[ch] * dy.data()[i];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let c = dy.cols();
                let g = slot(grads, *x, self.value(*x).shape()).data_mut();
                for (i, (&d, &row)) in dy.data().iter().zip(argmax).enumerate() {
                    let idx = row as usize * c + i % c;
                    g[idx] = g[idx] + d;
                }
            }
            Op::ConcatBroadcast { tokens, global, group } => {
                let d1 = self.value(*tokens).cols();
                let d2 = self.value(*global).cols();
                if self.rg(*tokens) {
                    let g = slot(grads, *tokens, self.value(*tokens).shape()).data_mut();
                    for r in 0..dy.rows() {
                        for (a, &d) in g[r * d1..(r + 1) * d1].iter_mut().zip(&dy.row(r)[..d1]) {
                            *a = *a + d;
                        }
                    }
                }
                if self.rg(*global) {
                    let g = slot(grads, *global, self.value(*global).shape()).data_mut();
                    for r in 0..dy.rows() {
                        let gi = r / group;
                        for (a, &d) in g[gi * d2..(gi + 1) * d2].iter_mut().zip(&dy.row(r)[d1..]) {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = slot(grads, *x, dy.shape()).data_mut();
                for ((a, &d), &m) in g.iter_mut().zip(dy.data()).zip(mask) {
                    *a = *a + d * m;
                }
            }
            Op::CrossEntropy { logits, grad } => {
                let up = dy.data()[0];
                let g = slot(grads, *logits, self.value(*logits).shape()).data_mut();
                for (a, &l) in g.iter_mut().zip(grad) {
                    *a = *a + up * l;
                }
            }
            Op::Custom { inputs } => {
                let up = dy.data()[0];
                for (id, local) in inputs {
                    if self.rg(*id) {
                        let g = slot(grads, *id, local.shape()).data_mut();
                        for (a, &l) in g.iter_mut().zip(local.data()) {
                            *a = *a + up * l;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let up = dy.data()[0];
                let g = slot(grads, *x, self.value(*x).shape()).data_mut();
                for (a, &w) in g.iter_mut().zip(weights) {
                    *a = *a + up * w;
                }
            }
            Op::Scale { x, factor } => {
                let g = slot(grads, *x, dy.shape()).data_mut();
                for (a, &d) in g.iter_mut().zip(dy.data()) {
                    *a = *a + d * *factor;
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}
