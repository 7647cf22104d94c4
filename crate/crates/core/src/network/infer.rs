//! Gradient-free forward pass for eval and statistics-only modes.
//!
//! Produces the same logits and batch statistics as [`Model::record`], bit for
//! bit, without keeping activations for a backward sweep.

use super::{Bn, Lin, Model};
use crate::autodiff::{gemm, BatchStats, BnMode, Scalar, Tensor, Transpose};
use crate::error::{ensure, Result};
use crate::geometry::PatchSet;

const PATCHES_PER_SLAB: usize = 64;

/// Row-major activations `[rows, cols]`.
struct Act<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Classifier logits `[B, classes]` and, in `AdaptStats` mode, the batch
    /// statistics of every BatchNorm layer in layout order. The skeletal
    /// heads are not evaluated and the model is not modified.
    pub fn infer(&self, batch: &[PatchSet<T>], mode: BnMode) -> Result<(Tensor<T>, Vec<BatchStats<T>>)> {
        ensure!(mode != BnMode::Train, "inference does not run in train mode");
        let c = &self.config;
        let (m, k) = (c.patches, c.neighbors);
        let b = batch.len();
        ensure!(b >= 1, "empty batch");
        for (i, p) in batch.iter().enumerate() {
            ensure!(
                p.num_patches() == m && p.patch_size() == k,
                "sample {} has {} patches of {} points, model expects {} x {}",
                i,
                p.num_patches(),
                p.patch_size(),
                m,
                k
            );
        }
        if mode.uses_batch_stats() {
            ensure!(b >= 2, "{:?} mode needs at least 2 samples per batch, got {}", mode, b);
        }
        let mut stats = Vec::new();
        let eps = T::of(c.bn_eps);
        let l = &self.layout;

        let x = Act {
            rows: b * m * k,
            cols: 3,
            data: batch.iter().flat_map(|p| p.neighborhoods.iter().flatten().copied()).collect(),
        };
        let centers = Act {
            rows: b * m,
            cols: 3,
            data: batch.iter().flat_map(|p| p.centers.points().iter().flatten().copied()).collect(),
        };
        let mut h = self.linear(&x, l.embed1);
        self.bn_relu(&mut h, l.embed_bn, mode, eps, &mut stats)?;
        // Pooling right after each slab keeps the widest activation in cache.
        let slab = PATCHES_PER_SLAB * k * h.cols;
        let mut pooled = Vec::with_capacity(b * m * c.width);
        for rows in h.data.chunks(slab) {
            let part = Act {
                rows: rows.len() / h.cols,
                cols: h.cols,
                data: rows.to_vec(),
            };
            pooled.extend(max_pool(&self.linear(&part, l.embed2), k).data);
        }
        let mut x = Act {
            rows: b * m,
            cols: c.width,
            data: pooled,
        };
        let pos = self.linear(&centers, l.center);
        add_assign(&mut x, &pos);
        for &blk in &l.encoder {
            self.block(&mut x, blk, m, mode, eps, &mut stats)?;
        }
        let combined = if c.feature_summation {
            let f_enc = Act {
                rows: x.rows,
                cols: x.cols,
                data: x.data.clone(),
            };
            for &blk in &l.decoder {
                self.block(&mut x, blk, m, mode, eps, &mut stats)?;
            }
            let mut s = f_enc;
            add_assign(&mut s, &x);
            s
        } else {
            // The decoder only feeds the heads, but its statistics are still
            // part of the layer list.
            let f_enc = Act {
                rows: x.rows,
                cols: x.cols,
                data: x.data.clone(),
            };
            if mode.uses_batch_stats() {
                for &blk in &l.decoder {
                    self.block(&mut x, blk, m, mode, eps, &mut stats)?;
                }
            }
            f_enc
        };
        let pooled = max_pool(&combined, m);
        let mut h = self.linear(&pooled, l.cls1);
        self.bn_relu(&mut h, l.cls_bn, mode, eps, &mut stats)?;
        let logits = self.linear(&h, l.cls2);
        Ok((Tensor::new(vec![logits.rows, logits.cols], logits.data)?, stats))
    }

    fn linear(&self, x: &Act<T>, l: Lin) -> Act<T> {
        let (w, bias) = (&self.tensors[l.w], &self.tensors[l.b]);
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        debug_assert_eq!(x.cols, fan_in);
        let mut out = Vec::with_capacity(x.rows * fan_out);
        for _ in 0..x.rows {
            out.extend_from_slice(bias.data());
        }
        gemm(x.rows, fan_in, fan_out, &x.data, w.data(), &mut out, Transpose::None, true);
        Act {
            rows: x.rows,
            cols: fan_out,
            data: out,
        }
    }

    fn bn_relu(&self, x: &mut Act<T>, bn: Bn, mode: BnMode, eps: T, stats: &mut Vec<BatchStats<T>>) -> Result<()> {
        let c = x.cols;
        let (mean, var) = if mode.uses_batch_stats() {
            ensure!(x.rows >= 2, "batch statistics need at least 2 rows, got {}", x.rows);
            let n = T::of(x.rows as f64);
            let mut mean = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            for m in &mut mean {
                *m = *m / n;
            }
            let mut var = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            let unbiased = var.iter().map(|&s| s / (n - T::one())).collect();
            for s in &mut var {
                *s = *s / n;
            }
            stats.push(BatchStats {
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, var)
        } else {
            (self.tensors[bn.mean].data().to_vec(), self.tensors[bn.var].data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.tensors[bn.gamma].data(), self.tensors[bn.beta].data());
        for row in x.data.chunks_exact_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                let y = g[ch] * ((*v - mean[ch]) * inv_std[ch]) + b[ch];
                *v = if y > T::zero() { y } else { T::zero() };
            }
        }
        Ok(())
    }

    /// `x += relu(bn(linear([x || maxpool(x)])))`, in place.
    fn block(
        &self,
        x: &mut Act<T>,
        (l, bn): (Lin, Bn),
        group: usize,
        mode: BnMode,
        eps: T,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<()> {
        let global = max_pool(x, group);
        let width = x.cols + global.cols;
        let mut cat = Vec::with_capacity(x.rows * width);
        for (r, row) in x.data.chunks_exact(x.cols).enumerate() {
            cat.extend_from_slice(row);
            cat.extend_from_slice(&global.data[(r / group) * global.cols..(r / group + 1) * global.cols]);
        }
        let cat = Act {
            rows: x.rows,
            cols: width,
            data: cat,
        };
        let mut h = self.linear(&cat, l);
        self.bn_relu(&mut h, bn, mode, eps, stats)?;
        add_assign(x, &h);
        Ok(())
    }
}

fn max_pool<T: Scalar>(x: &Act<T>, group: usize) -> Act<T> {
    let c = x.cols;
    let groups = x.rows / group;
    let mut out = vec![T::zero(); groups * c];
    for (g, best) in x.data.chunks_exact(group * c).zip(out.chunks_exact_mut(c)) {
        best.copy_from_slice(&g[..c]);
        for row in g[c..].chunks_exact(c) {
            for (bv, &v) in best.iter_mut().zip(row) {
                *bv = if v > *bv { v } else { *bv };
            }
        }
    }
    Act {
        rows: groups,
        cols: c,
        data: out,
    }
}

fn add_assign<T: Scalar>(x: &mut Act<T>, y: &Act<T>) {
    for (a, &b) in x.data.iter_mut().zip(&y.data) {
        *a = *a + b;
    }
}
