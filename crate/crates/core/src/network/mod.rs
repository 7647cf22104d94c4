//! Patch-token point network with a skeletal branch and a classifier.
//!
//! All tensors live in one flat, named list whose order is fixed by the
//! configuration; checkpoints, optimizers and diffs all walk that list.

mod checkpoint;
mod infer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fold_running, BatchStats, BnMode, NodeId, Scalar, Tape, Tensor};
use crate::error::{ensure, Result};
use crate::geometry::{PatchSet, Point};
use crate::losses::{skeletal_parts, SkeletalLossWeights};
use crate::skeleton::SkeletalCloud;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const DROPOUT_SALT: u64 = 0x6a09_e667_f3bc_c909;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patches per cloud (M).
    pub patches: usize,
    /// Points per patch (K_nbr).
    pub neighbors: usize,
    /// Token width (d).
    pub width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub classes: usize,
    /// Hidden width of the center and radius heads.
    pub head_hidden: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    /// Classify from encoder + decoder features instead of encoder features alone.
    pub feature_summation: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patches: 32,
            neighbors: 16,
            width: 128,
            encoder_blocks: 2,
            decoder_blocks: 2,
            classes: 8,
            head_hidden: 64,
            classifier_hidden: 64,
            dropout: 0.3,
            feature_summation: true,
            bn_momentum: crate::autodiff::DEFAULT_MOMENTUM,
            bn_eps: crate::autodiff::DEFAULT_EPS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            patches: 4,
            neighbors: 4,
            width: 16,
            classes: 3,
            head_hidden: 8,
            classifier_hidden: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 8 && self.width % 2 == 0, "width must be even and at least 8, got {}", self.width);
        ensure!(self.patches >= 1 && self.neighbors >= 1, "patches and neighbors must be positive");
        ensure!(
            self.encoder_blocks >= 1 && self.decoder_blocks >= 1,
            "need at least one encoder and one decoder block"
        );
        ensure!(self.classes >= 2, "need at least 2 classes, got {}", self.classes);
        ensure!(self.head_hidden >= 1 && self.classifier_hidden >= 1, "hidden widths must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1), got {}", self.dropout);
        ensure!((0.0..=1.0).contains(&self.bn_momentum), "bn_momentum must lie in [0, 1]");
        ensure!(self.bn_eps > 0.0 && self.bn_eps.is_finite(), "bn_eps must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn is_trainable(self) -> bool {
        !self.is_running_stat()
    }

    pub fn is_running_stat(self) -> bool {
        matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    fan_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    slots: Vec<Slot>,
    embed1: Lin,
    embed_bn: Bn,
    embed2: Lin,
    center: Lin,
    encoder: Vec<(Lin, Bn)>,
    decoder: Vec<(Lin, Bn)>,
    head_s: [Lin; 2],
    head_r: [Lin; 2],
    cls1: Lin,
    cls_bn: Bn,
    cls2: Lin,
    bns: Vec<(String, Bn)>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut slots = Vec::new();
        let mut bns = Vec::new();
        let push = |slots: &mut Vec<Slot>, name: String, kind: TensorKind, shape: Vec<usize>, fan_in: usize| {
            slots.push(Slot { name, kind, shape, fan_in });
            slots.len() - 1
        };
        let lin = |slots: &mut Vec<Slot>, name: &str, i: usize, o: usize| Lin {
            w: push(slots, format!("{name}.weight"), TensorKind::Weight, vec![i, o], i),
            b: push(slots, format!("{name}.bias"), TensorKind::Bias, vec![o], i),
        };
        let mut bn = |slots: &mut Vec<Slot>, name: &str, ch: usize| {
            let mut p = |suffix: &str, kind| {
                slots.push(Slot {
                    name: format!("{name}.{suffix}"),
                    kind,
                    shape: vec![ch],
                    fan_in: 0,
                });
                slots.len() - 1
            };
            let b = Bn {
                gamma: p("gamma", TensorKind::Gamma),
                beta: p("beta", TensorKind::Beta),
                mean: p("running_mean", TensorKind::RunningMean),
                var: p("running_var", TensorKind::RunningVar),
            };
            bns.push((name.to_string(), b));
            b
        };
        let (d, h) = (c.width, c.width / 2);
        let embed1 = lin(&mut slots, "embed.lin1", 3, h);
        let embed_bn = bn(&mut slots, "embed.bn", h);
        let embed2 = lin(&mut slots, "embed.lin2", h, d);
        let center = lin(&mut slots, "embed.center", 3, d);
        let mut blocks = |slots: &mut Vec<Slot>, prefix: &str, n: usize| -> Vec<(Lin, Bn)> {
            (0..n)
                .map(|i| {
                    let l = lin(slots, &format!("{prefix}.{i}.lin"), 2 * d, d);
                    (l, bn(slots, &format!("{prefix}.{i}.bn"), d))
                })
                .collect()
        };
        let encoder = blocks(&mut slots, "encoder", c.encoder_blocks);
        let decoder = blocks(&mut slots, "decoder", c.decoder_blocks);
        let head_s = [
            lin(&mut slots, "head_center.lin1", d, c.head_hidden),
            lin(&mut slots, "head_center.lin2", c.head_hidden, 3),
        ];
        let head_r = [
            lin(&mut slots, "head_radius.lin1", d, c.head_hidden),
            lin(&mut slots, "head_radius.lin2", c.head_hidden, 1),
        ];
        let cls1 = lin(&mut slots, "classifier.lin1", d, c.classifier_hidden);
        let cls_bn = bn(&mut slots, "classifier.bn", c.classifier_hidden);
        let cls2 = lin(&mut slots, "classifier.lin2", c.classifier_hidden, c.classes);
        Self {
            slots,
            embed1,
            embed_bn,
            embed2,
            center,
            encoder,
            decoder,
            head_s,
            head_r,
            cls1,
            cls_bn,
            cls2,
            bns,
        }
    }
}

/// Read-only view of one BatchNorm layer's running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BnLayerView<'a, T> {
    pub name: &'a str,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
    dropout_step: u64,
}

/// Per-sample outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    /// `[B, M, d]`.
    pub f_enc: Tensor<T>,
    pub f_dec: Tensor<T>,
    pub f_combined: Tensor<T>,
    pub skeletons: Vec<SkeletalCloud<T>>,
    /// `[B, classes]`.
    pub logits: Tensor<T>,
}

/// Which parts of the graph to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordOptions {
    pub mode: BnMode,
    /// Build the center and radius heads.
    pub heads: bool,
}

impl RecordOptions {
    pub fn new(mode: BnMode) -> Self {
        Self { mode, heads: true }
    }
}

/// A recorded forward pass, ready for a loss and a backward sweep.
#[derive(Debug)]
pub struct Recorded<T> {
    tape: Tape<T>,
    mode: BnMode,
    batch: usize,
    patches: usize,
    width: usize,
    params: Vec<NodeId>,
    pub f_enc: NodeId,
    pub f_dec: NodeId,
    pub f_combined: NodeId,
    pub centers: Option<NodeId>,
    pub radii: Option<NodeId>,
    pub logits: NodeId,
    /// One entry per BatchNorm layer, in layout order; empty in `Eval` mode.
    pub stats: Vec<BatchStats<T>>,
}

/// Training objective and gradients for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub skeletal: T,
    pub classification: Option<T>,
    pub total: T,
    /// Aligned with [`Model::parameters`].
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fan-in scaled uniform weights and biases, identity BatchNorm.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = layout
            .slots
            .iter()
            .map(|s| match s.kind {
                TensorKind::Weight | TensorKind::Bias => {
                    let bound = 1.0 / (s.fan_in as f64).sqrt();
                    let n: usize = s.shape.iter().product();
                    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                    Tensor::new(s.shape.clone(), data).expect("layout shape")
                }
                TensorKind::Gamma | TensorKind::RunningVar => Tensor::full(&s.shape, T::one()),
                TensorKind::Beta | TensorKind::RunningMean => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            config,
            layout,
            tensors,
            dropout_step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of dropout masks drawn so far.
    pub fn dropout_step(&self) -> u64 {
        self.dropout_step
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, TensorKind, &Tensor<T>)> {
        self.layout
            .slots
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| (s.name.as_str(), s.kind, t))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors().find(|(n, _, _)| *n == name).map(|(_, _, t)| t)
    }

    /// Mutable access by name; the shape must be preserved by the caller.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.layout.slots.iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    /// Trainable tensors in layout order.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.named_tensors()
            .filter(|(_, k, _)| k.is_trainable())
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layout
            .slots
            .iter()
            .zip(self.tensors.iter_mut())
            .filter(|(s, _)| s.kind.is_trainable())
            .map(|(_, t)| t)
            .collect()
    }

    /// Count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<T> {
        self.parameters().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[T]) -> Result<()> {
        ensure!(
            flat.len() == self.parameter_count(),
            "{} values for {} parameters",
            flat.len(),
            self.parameter_count()
        );
        let mut at = 0;
        for t in self.parameters_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn batchnorm_layers(&self) -> Vec<BnLayerView<'_, T>> {
        self.layout
            .bns
            .iter()
            .map(|(name, b)| BnLayerView {
                name,
                running_mean: &self.tensors[b.mean],
                running_var: &self.tensors[b.var],
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            dropout_step: self.dropout_step,
        }
    }

    /// Bitwise equality of every tensor and of the dropout counter.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.dropout_step == other.dropout_step
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    /// Folds per-layer batch statistics into the running statistics.
    pub fn fold_stats(&mut self, stats: &[BatchStats<T>], momentum: T) -> Result<()> {
        ensure!(
            stats.len() == self.layout.bns.len(),
            "{} statistics for {} BatchNorm layers",
            stats.len(),
            self.layout.bns.len()
        );
        for ((_, b), s) in self.layout.bns.iter().zip(stats) {
            let (lo, hi) = (b.mean.min(b.var), b.mean.max(b.var));
            let (left, right) = self.tensors.split_at_mut(hi);
            let (mean, var) = if b.mean == lo {
                (&mut left[lo], &mut right[0])
            } else {
                (&mut right[0], &mut left[lo])
            };
            fold_running(mean, var, s, momentum)?;
        }
        Ok(())
    }

    /// Forward pass that applies the mode's side effects: batch statistics
    /// are folded with the configured momentum, and train mode consumes one
    /// dropout mask.
    pub fn forward(&mut self, batch: &[PatchSet<T>], mode: BnMode) -> Result<ForwardOutput<T>> {
        let rec = self.record(batch, RecordOptions::new(mode))?;
        if mode.uses_batch_stats() {
            self.fold_stats(&rec.stats, T::of(self.config.bn_momentum))?;
        }
        if mode == BnMode::Train {
            self.dropout_step += 1;
        }
        rec.output()
    }

    /// Pure eval-mode forward.
    pub fn forward_eval(&self, batch: &[PatchSet<T>]) -> Result<ForwardOutput<T>> {
        self.record(batch, RecordOptions::new(BnMode::Eval))?.output()
    }

    /// Eval-mode argmax predictions.
    pub fn predict(&self, batch: &[PatchSet<T>]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(batch, BnMode::Eval)?.0))
    }

    /// Advances the dropout counter, as a train-mode [`Model::forward`] does.
    pub fn advance_dropout(&mut self) {
        self.dropout_step += 1;
    }

    /// Builds the forward graph without touching model state. Train mode
    /// uses the mask for the current dropout step.
    pub fn record(&self, batch: &[PatchSet<T>], opts: RecordOptions) -> Result<Recorded<T>> {
        let c = &self.config;
        let (m, k, d) = (c.patches, c.neighbors, c.width);
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
        if opts.mode.uses_batch_stats() {
            ensure!(b >= 2, "{:?} mode needs at least 2 samples per batch, got {}", opts.mode, b);
        }
        let train = opts.mode == BnMode::Train;
        let mut tape = Tape::new();
        let leaves: Vec<Option<NodeId>> = self
            .layout
            .slots
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| (!s.kind.is_running_stat()).then(|| tape.leaf(t.clone(), train)))
            .collect();
        let mut g = Graph {
            tape,
            leaves: &leaves,
            tensors: &self.tensors,
            mode: opts.mode,
            eps: T::of(c.bn_eps),
            stats: Vec::new(),
        };
        let offsets: Vec<T> = batch.iter().flat_map(|p| p.neighborhoods.iter().flatten().copied()).collect();
        let x = g.tape.constant(Tensor::new(vec![b * m * k, 3], offsets)?);
        let centers: Vec<T> = batch.iter().flat_map(|p| p.centers.points().iter().flatten().copied()).collect();
        let centers = g.tape.constant(Tensor::new(vec![b * m, 3], centers)?);

        let l = &self.layout;
        let h = g.linear(x, l.embed1)?;
        let h = g.bn(h, l.embed_bn)?;
        let h = g.tape.relu(h);
        let h = g.linear(h, l.embed2)?;
        let tokens = g.tape.max_pool(h, k)?;
        let pos = g.linear(centers, l.center)?;
        let mut x = g.tape.add(tokens, pos)?;
        for &blk in &l.encoder {
            x = g.block(x, blk, m)?;
        }
        let f_enc = x;
        for &blk in &l.decoder {
            x = g.block(x, blk, m)?;
        }
        let f_dec = x;
        let f_combined = if c.feature_summation { g.tape.add(f_enc, f_dec)? } else { f_enc };

        let (sph_c, sph_r) = if opts.heads {
            let h = g.linear(f_dec, l.head_s[0])?;
            let h = g.tape.relu(h);
            let off = g.linear(h, l.head_s[1])?;
            let cen = g.tape.add(off, centers)?;
            let h = g.linear(f_dec, l.head_r[0])?;
            let h = g.tape.relu(h);
            let r = g.linear(h, l.head_r[1])?;
            (Some(cen), Some(g.tape.softplus(r)))
        } else {
            (None, None)
        };

        let pooled = g.tape.max_pool(f_combined, m)?;
        let h = g.linear(pooled, l.cls1)?;
        let h = g.bn(h, l.cls_bn)?;
        let mut h = g.tape.relu(h);
        if train && c.dropout > 0.0 {
            let mask = self.dropout_mask(b * c.classifier_hidden);
            h = g.tape.dropout(h, mask)?;
        }
        let logits = g.linear(h, l.cls2)?;

        let params = self
            .layout
            .slots
            .iter()
            .zip(&leaves)
            .filter(|(s, _)| s.kind.is_trainable())
            .map(|(_, id)| id.expect("trainable slots have leaves"))
            .collect();
        Ok(Recorded {
            tape: g.tape,
            mode: opts.mode,
            batch: b,
            patches: m,
            width: d,
            params,
            f_enc,
            f_dec,
            f_combined,
            centers: sph_c,
            radii: sph_r,
            logits,
            stats: g.stats,
        })
    }

    fn dropout_mask(&self, n: usize) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ DROPOUT_SALT);
        rng.set_stream(self.dropout_step);
        let keep = 1.0 - self.config.dropout;
        let scale = T::of(1.0 / keep);
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect()
    }
}

struct Graph<'a, T: Scalar> {
    tape: Tape<T>,
    leaves: &'a [Option<NodeId>],
    tensors: &'a [Tensor<T>],
    mode: BnMode,
    eps: T,
    stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Graph<'_, T> {
    fn leaf(&self, slot: usize) -> NodeId {
        self.leaves[slot].expect("parameter slot")
    }

    fn linear(&mut self, x: NodeId, l: Lin) -> Result<NodeId> {
        let (w, b) = (self.leaf(l.w), self.leaf(l.b));
        self.tape.linear(x, w, b)
    }

    fn bn(&mut self, x: NodeId, b: Bn) -> Result<NodeId> {
        let (gamma, beta) = (self.leaf(b.gamma), self.leaf(b.beta));
        let (rm, rv) = (self.tensors[b.mean].data(), self.tensors[b.var].data());
        let (y, stats) = self.tape.batchnorm(x, gamma, beta, self.mode, rm, rv, self.eps)?;
        self.stats.extend(stats);
        Ok(y)
    }

    /// `x + relu(bn(linear([x || maxpool(x)])))`.
    fn block(&mut self, x: NodeId, (l, b): (Lin, Bn), group: usize) -> Result<NodeId> {
        let global = self.tape.max_pool(x, group)?;
        let cat = self.tape.concat_broadcast(x, global, group)?;
        let h = self.linear(cat, l)?;
        let h = self.bn(h, b)?;
        let h = self.tape.relu(h);
        self.tape.add(x, h)
    }
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl<T: Scalar> Recorded<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits())
    }

    /// Sphere centers and radii predicted for sample `i`.
    pub fn spheres(&self, i: usize) -> Option<(Vec<Point<T>>, Vec<T>)> {
        let (c, r) = (self.centers?, self.radii?);
        let m = self.patches;
        let cv = self.tape.value(c).data();
        let rv = self.tape.value(r).data();
        let centers = (i * m..(i + 1) * m).map(|j| [cv[3 * j], cv[3 * j + 1], cv[3 * j + 2]]).collect();
        let radii = rv[i * m..(i + 1) * m].iter().map(|&v| v.max(T::min_positive_value())).collect();
        Some((centers, radii))
    }

    fn features(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(vec![self.batch, self.patches, self.width], self.tape.value(id).data().to_vec())
            .expect("feature shape")
    }

    pub fn output(&self) -> Result<ForwardOutput<T>> {
        ensure!(self.centers.is_some(), "forward output needs the skeletal heads");
        let skeletons = (0..self.batch)
            .map(|i| {
                let (c, r) = self.spheres(i).expect("heads recorded");
                SkeletalCloud::from_parts(&c, &r)
            })
            .collect::<Result<_>>()?;
        Ok(ForwardOutput {
            f_enc: self.features(self.f_enc),
            f_dec: self.features(self.f_dec),
            f_combined: self.features(self.f_combined),
            skeletons,
            logits: self.logits().clone(),
        })
    }

    /// Batch-mean skeletal loss of each sample against its own cloud, plus
    /// cross-entropy when labels are given, and the gradients of their sum.
    pub fn objective(
        mut self,
        clouds: &[&[Point<T>]],
        labels: Option<&[usize]>,
        weights: &SkeletalLossWeights,
        n_per_sphere: usize,
    ) -> Result<Objective<T>> {
        ensure!(self.mode == BnMode::Train, "gradients need a train-mode recording");
        ensure!(clouds.len() == self.batch, "{} clouds for a batch of {}", clouds.len(), self.batch);
        let (cen, rad) = match (self.centers, self.radii) {
            (Some(c), Some(r)) => (c, r),
            _ => return Err(crate::Error::invalid("objective needs the skeletal heads")),
        };
        let m = self.patches;
        let inv_b = T::one() / T::of(self.batch as f64);
        let mut gc = Vec::with_capacity(self.batch * m * 3);
        let mut gr = Vec::with_capacity(self.batch * m);
        let mut skeletal = T::zero();
        for (i, cloud) in clouds.iter().enumerate() {
            let (centers, radii) = self.spheres(i).expect("heads recorded");
            let lg = skeletal_parts(cloud, &centers, &radii, weights, n_per_sphere)?;
            skeletal = skeletal + lg.value * inv_b;
            gc.extend(lg.grad_centers.iter().flatten().map(|&g| g * inv_b));
            gr.extend(lg.grad_radii.iter().map(|&g| g * inv_b));
        }
        let gc = Tensor::new(vec![self.batch * m, 3], gc)?;
        let gr = Tensor::new(vec![self.batch * m, 1], gr)?;
        let skel_node = self.tape.custom_scalar(skeletal, vec![(cen, gc), (rad, gr)])?;
        let (total_node, classification) = match labels {
            Some(labels) => {
                let ce = self.tape.cross_entropy(self.logits, labels)?;
                let value = self.tape.value(ce).data()[0];
                (self.tape.add(skel_node, ce)?, Some(value))
            }
            None => (skel_node, None),
        };
        let total = self.tape.value(total_node).data()[0];
        let mut grads = self.tape.backward(total_node)?;
        let grads = self
            .params
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(self.tape.value(id).shape())))
            .collect();
        Ok(Objective {
            skeletal,
            classification,
            total,
            grads,
        })
    }
}
