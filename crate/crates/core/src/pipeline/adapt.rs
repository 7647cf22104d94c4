use std::time::Instant;

use super::{sample_seed, tokenize_for, view_transforms, Evaluation, OptimState};
use crate::autodiff::BnMode;
use crate::datasets::{AdaptConfig, AdaptMode, LabeledDataset, RunConfig};
use crate::error::{ensure, Result};
use crate::geometry::{PatchSet, Point, PointCloud};
use crate::losses::SkeletalLossWeights;
use crate::network::{Model, RecordOptions};

/// Timed samples required after warmup in a throughput measurement.
pub const MIN_TIMED_SAMPLES: usize = 20;

/// One adaptation protocol bound to a source model.
///
/// `pristine` is never modified. Every [`AdaptSession::run`] starts from it,
/// which is the per-corruption reset.
#[derive(Debug, Clone)]
pub struct AdaptSession {
    config: AdaptConfig,
    loss: SkeletalLossWeights,
    n_per_sphere: usize,
    seed: u64,
    pristine: Model,
    live: Model,
    optim: OptimState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub predictions: Vec<usize>,
    /// Samples whose adaptation loss was not finite; their update was dropped.
    pub skipped: Vec<bool>,
    pub seconds: f64,
}

impl AdaptOutcome {
    pub fn skipped_count(&self) -> usize {
        self.skipped.iter().filter(|&&s| s).count()
    }

    pub fn samples_per_second(&self) -> f64 {
        self.predictions.len() as f64 / self.seconds.max(f64::MIN_POSITIVE)
    }
}

struct Prepared {
    patches: PatchSet,
    views: Vec<PatchSet>,
    view_clouds: Vec<PointCloud>,
}

impl AdaptSession {
    pub fn new(
        model: Model,
        config: AdaptConfig,
        loss: SkeletalLossWeights,
        n_per_sphere: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        ensure!(n_per_sphere >= 1, "n_per_sphere must be positive");
        // Batch statistics in the classifier are taken over the views of the
        // samples adapted together.
        let together = if config.mode == AdaptMode::Standard { config.batch_size } else { 1 };
        ensure!(
            config.views * together >= 2,
            "{} adaptation needs at least 2 views per step, got {}",
            config.mode,
            config.views * together
        );
        let optim = OptimState::new(&config.optimizer, &model)?;
        Ok(Self {
            config,
            loss,
            n_per_sphere,
            seed,
            live: model.clone(),
            pristine: model,
            optim,
        })
    }

    pub fn from_run_config(model: Model, cfg: &RunConfig) -> Result<Self> {
        Self::new(model, cfg.adapt.clone(), cfg.loss, cfg.n_per_sphere, cfg.seed)
    }

    pub fn mode(&self) -> AdaptMode {
        self.config.mode
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn pristine(&self) -> &Model {
        &self.pristine
    }

    pub fn live(&self) -> &Model {
        &self.live
    }

    pub fn optimizer(&self) -> &OptimState {
        &self.optim
    }

    /// Restores the live model and clears the optimizer moments.
    pub fn reset(&mut self) {
        self.live = self.pristine.clone();
        self.optim.reset();
    }

    /// Resets, then adapts over the stream in order. Labels never enter.
    pub fn run(&mut self, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
        self.reset();
        self.process(clouds, ids)
    }

    /// Continues the stream from the current live state.
    pub fn process(&mut self, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
        ensure!(clouds.len() == ids.len(), "{} clouds with {} ids", clouds.len(), ids.len());
        let start = Instant::now();
        let mut predictions = Vec::with_capacity(clouds.len());
        let mut skipped = Vec::with_capacity(clouds.len());
        match self.config.mode {
            AdaptMode::OnlineBn => {
                for (c, id) in clouds.iter().zip(ids) {
                    predictions.push(self.online_bn_sample(c, id)?);
                    skipped.push(false);
                }
            }
            AdaptMode::OnlineBp => {
                for (c, id) in clouds.iter().zip(ids) {
                    let p = self.prepare(c, id)?;
                    let ok = self.backprop_steps(&[&p], self.config.iterations())?;
                    predictions.extend(self.live.predict(std::slice::from_ref(&p.patches))?);
                    skipped.push(!ok);
                }
            }
            AdaptMode::Standard => {
                let group = self.config.batch_size;
                for (cs, is) in clouds.chunks(group).zip(ids.chunks(group)) {
                    self.reset();
                    let prepared: Vec<Prepared> =
                        cs.iter().zip(is).map(|(c, id)| self.prepare(c, id)).collect::<Result<_>>()?;
                    let refs: Vec<&Prepared> = prepared.iter().collect();
                    let ok = self.backprop_steps(&refs, self.config.iterations())?;
                    let originals: Vec<PatchSet> = prepared.into_iter().map(|p| p.patches).collect();
                    predictions.extend(self.live.predict(&originals)?);
                    skipped.extend(std::iter::repeat_n(!ok, cs.len()));
                }
            }
        }
        Ok(AdaptOutcome {
            predictions,
            skipped,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn view_patches(&self, patches: &PatchSet, id: &str) -> Result<Vec<PatchSet>> {
        let transforms = view_transforms(self.config.views, self.config.augmentation, sample_seed(self.seed, id))?;
        Ok(transforms.iter().map(|t| t.apply_patches(patches)).collect())
    }

    fn online_bn_sample(&mut self, cloud: &PointCloud, id: &str) -> Result<usize> {
        let patches = tokenize_for(&self.live, cloud)?;
        let views = self.view_patches(&patches, id)?;
        let (_, stats) = self.live.infer(&views, BnMode::AdaptStats)?;
        self.live.fold_stats(&stats, self.config.momentum as f32)?;
        Ok(self.live.predict(std::slice::from_ref(&patches))?[0])
    }

    fn prepare(&self, cloud: &PointCloud, id: &str) -> Result<Prepared> {
        let patches = tokenize_for(&self.live, cloud)?;
        let transforms = view_transforms(self.config.views, self.config.augmentation, sample_seed(self.seed, id))?;
        let views = transforms.iter().map(|t| t.apply_patches(&patches)).collect();
        let view_clouds = transforms.iter().map(|t| t.apply(cloud)).collect();
        Ok(Prepared {
            patches,
            views,
            view_clouds,
        })
    }

    /// Skeletal-loss steps on the views of `samples`. Returns false, leaving
    /// the state as it was before the failing step, if the loss or a gradient
    /// is not finite.
    fn backprop_steps(&mut self, samples: &[&Prepared], iterations: usize) -> Result<bool> {
        let views: Vec<PatchSet> = samples.iter().flat_map(|p| p.views.iter().cloned()).collect();
        let clouds: Vec<&[Point]> = samples
            .iter()
            .flat_map(|p| p.view_clouds.iter().map(PointCloud::points))
            .collect();
        for _ in 0..iterations {
            let mut rec = self.live.record(&views, RecordOptions::new(BnMode::Train))?;
            let stats = std::mem::take(&mut rec.stats);
            let obj = rec.objective(&clouds, None, &self.loss, self.n_per_sphere)?;
            if !obj.total.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
                return Ok(false);
            }
            self.optim.apply(&mut self.live, &obj.grads)?;
            self.live.fold_stats(&stats, self.config.momentum as f32)?;
            self.live.advance_dropout();
        }
        Ok(true)
    }
}

fn run_mode(session: &mut AdaptSession, mode: AdaptMode, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
    ensure!(
        session.mode() == mode,
        "session is configured for {}, not {}",
        session.mode(),
        mode
    );
    session.run(clouds, ids)
}

/// Running statistics only; parameters stay bitwise unchanged.
pub fn adapt_online_bn(session: &mut AdaptSession, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
    run_mode(session, AdaptMode::OnlineBn, clouds, ids)
}

/// Skeletal-loss updates whose state carries across the stream.
pub fn adapt_online_bp(session: &mut AdaptSession, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
    run_mode(session, AdaptMode::OnlineBp, clouds, ids)
}

/// Every sample (or buffered group) starts from the source model.
pub fn adapt_standard(session: &mut AdaptSession, clouds: &[PointCloud], ids: &[String]) -> Result<AdaptOutcome> {
    run_mode(session, AdaptMode::Standard, clouds, ids)
}

/// Adapts over the dataset in order, then scores against its labels.
pub fn adapt_dataset(session: &mut AdaptSession, ds: &LabeledDataset) -> Result<(AdaptOutcome, Evaluation)> {
    let outcome = session.run(&ds.clouds, &ds.ids)?;
    let eval = Evaluation::from_predictions(outcome.predictions.clone(), &ds.labels, ds.num_classes())?;
    Ok((outcome, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    /// One entry per repetition.
    pub samples_per_second: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repetitions.
    pub std: f64,
}

impl Throughput {
    pub fn cv(&self) -> f64 {
        self.std / self.mean
    }
}

/// Times the stream after `warmup` samples, `reps` times, each repetition
/// starting from the source model.
pub fn bench_throughput(
    session: &mut AdaptSession,
    clouds: &[PointCloud],
    ids: &[String],
    warmup: usize,
    reps: usize,
) -> Result<Throughput> {
    ensure!(
        clouds.len() >= warmup + MIN_TIMED_SAMPLES,
        "stream of {} samples is too short for {} warmup plus {} timed samples",
        clouds.len(),
        warmup,
        MIN_TIMED_SAMPLES
    );
    ensure!(reps >= 3, "need at least 3 repetitions, got {}", reps);
    ensure!(clouds.len() == ids.len(), "{} clouds with {} ids", clouds.len(), ids.len());
    let mut rates = Vec::with_capacity(reps);
    for _ in 0..reps {
        session.reset();
        session.process(&clouds[..warmup], &ids[..warmup])?;
        let timed = session.process(&clouds[warmup..], &ids[warmup..])?;
        rates.push(timed.samples_per_second());
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Throughput {
        samples_per_second: rates,
        mean,
        std: var.sqrt(),
    })
}
