//! Pretraining, evaluation, test-time adaptation and throughput measurement.

mod adapt;
mod optim;
mod views;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BnMode;
use crate::datasets::{LabeledDataset, RunConfig};
use crate::error::{ensure, Error, Result};
use crate::geometry::{tokenize, PatchSet, Point, PointCloud, StartRule};
use crate::network::{Model, RecordOptions};

pub use adapt::{
    adapt_dataset, adapt_online_bn, adapt_online_bp, adapt_standard, bench_throughput, AdaptOutcome, AdaptSession,
    Throughput, MIN_TIMED_SAMPLES,
};
pub use optim::OptimState;
pub use views::{make_views, view_transforms, ViewTransform};

/// Scale augmentation draws a factor from this range.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);

const SHUFFLE_SALT: u64 = 0x243f_6a88_85a3_08d3;
const SCALE_SALT: u64 = 0x1319_8a2e_0370_7344;

/// Derives a child seed; distinct tags give unrelated streams.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the session seed and a sample id, so that a sample's views do
/// not depend on its position in the stream.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Tokenizes with the first point as the fixed FPS start.
pub fn tokenize_for(model: &Model, cloud: &PointCloud) -> Result<PatchSet> {
    let c = model.config();
    tokenize(cloud, c.patches, c.neighbors, StartRule::Index(0))
}

fn scale_patches(p: &PatchSet, f: f32) -> PatchSet {
    PatchSet {
        centers: PointCloud::from_trusted(p.centers.points().iter().map(|q| q.map(|v| v * f)).collect()),
        neighborhoods: p.neighborhoods.iter().map(|q| q.map(|v| v * f)).collect(),
        center_indices: p.center_indices.clone(),
        neighbor_indices: p.neighbor_indices.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub skeletal: f64,
    pub classification: f64,
    pub total: f64,
    pub test_accuracy: Option<f64>,
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "skeletal", "classification", "total", "test_accuracy"];

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::format(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(HISTORY_HEADER).map_err(to_err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.skeletal),
            format!("{:.6}", r.classification),
            format!("{:.6}", r.total),
            r.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Splits a shuffled order into batches of `size`; a trailing singleton is
/// merged into the previous batch and a one-sample dataset is repeated, since
/// the classifier normalizes over the batch.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.last().is_some_and(|b| b.len() == 1) {
        if out.len() > 1 {
            let last = out.pop().expect("nonempty");
            out.last_mut().expect("nonempty").extend(last);
        } else {
            let only = out[0][0];
            out[0].push(only);
        }
    }
    out
}

/// Trains on the sum of the batch-mean skeletal loss and cross-entropy.
///
/// With a `test` set, clean accuracy is recorded per epoch and training stops
/// early once it reaches `cfg.target_accuracy`.
pub fn pretrain(
    mut model: Model,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &RunConfig,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(
        train.num_classes() == model.config().classes,
        "dataset has {} classes, model has {}",
        train.num_classes(),
        model.config().classes
    );
    let tokens: Vec<PatchSet> = train.clouds.iter().map(|c| tokenize_for(&model, c)).collect::<Result<_>>()?;
    let mut optim = OptimState::new(&cfg.optimizer, &model)?;
    let momentum = model.config().bn_momentum as f32;
    let mut shuffle = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SHUFFLE_SALT));
    let mut scale_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SCALE_SALT));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut skel_sum, mut cls_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            step += 1;
            let factors: Vec<f32> = batch
                .iter()
                .map(|_| {
                    if cfg.scale_augmentation {
                        scale_rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1) as f32
                    } else {
                        1.0
                    }
                })
                .collect();
            let inputs: Vec<PatchSet> = batch
                .iter()
                .zip(&factors)
                .map(|(&i, &f)| if f == 1.0 { tokens[i].clone() } else { scale_patches(&tokens[i], f) })
                .collect();
            let clouds: Vec<Vec<Point>> = batch
                .iter()
                .zip(&factors)
                .map(|(&i, &f)| train.clouds[i].points().iter().map(|p| p.map(|v| v * f)).collect())
                .collect();
            let cloud_refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();

            let mut rec = model.record(&inputs, RecordOptions::new(BnMode::Train))?;
            let stats = std::mem::take(&mut rec.stats);
            let obj = rec.objective(&cloud_refs, Some(&labels), &cfg.loss, cfg.n_per_sphere)?;
            let total = f64::from(obj.total);
            if !total.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, step, loss: total });
            }
            optim.apply(&mut model, &obj.grads)?;
            model.fold_stats(&stats, momentum)?;
            model.advance_dropout();
            skel_sum += f64::from(obj.skeletal);
            cls_sum += obj.classification.map_or(0.0, f64::from);
            steps += 1;
        }
        let n = steps as f64;
        let test_accuracy = test.map(|t| evaluate(&model, t).map(|e| e.accuracy)).transpose()?;
        history.push(EpochRecord {
            epoch,
            skeletal: skel_sum / n,
            classification: cls_sum / n,
            total: (skel_sum + cls_sum) / n,
            test_accuracy,
        });
        if let (Some(target), Some(acc)) = (cfg.target_accuracy, test_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per class label.
    pub per_class: Vec<(usize, usize)>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<usize>, labels: &[usize], classes: usize) -> Result<Self> {
        ensure!(predictions.len() == labels.len(), "{} predictions for {} labels", predictions.len(), labels.len());
        let mut per_class = vec![(0, 0); classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            ensure!(l < classes, "label {} out of range", l);
            per_class[l].1 += 1;
            if p == l {
                per_class[l].0 += 1;
            }
        }
        let correct = per_class.iter().map(|c| c.0).sum();
        let total = labels.len();
        Ok(Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            per_class,
            predictions,
        })
    }
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode predictions for every cloud; the model is not modified.
pub fn predict_all(model: &Model, clouds: &[PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_CHUNK) {
        let tokens: Vec<PatchSet> = chunk.iter().map(|c| tokenize_for(model, c)).collect::<Result<_>>()?;
        out.extend(model.predict(&tokens)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, test: &LabeledDataset) -> Result<Evaluation> {
    ensure!(
        test.num_classes() == model.config().classes,
        "dataset has {} classes, model has {}",
        test.num_classes(),
        model.config().classes
    );
    Evaluation::from_predictions(predict_all(model, &test.clouds)?, &test.labels, test.num_classes())
}

pub const BN_SNAPSHOT_HEADER: [&str; 4] = ["layer", "channel", "running_mean", "running_var"];

/// One row per BatchNorm channel.
pub fn export_bn_snapshot(model: &Model, path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::format(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(BN_SNAPSHOT_HEADER).map_err(to_err)?;
    for layer in model.batchnorm_layers() {
        for (c, (m, v)) in layer.running_mean.data().iter().zip(layer.running_var.data()).enumerate() {
            w.write_record([layer.name.to_string(), c.to_string(), m.to_string(), v.to_string()])
                .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
