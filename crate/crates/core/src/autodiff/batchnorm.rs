use super::{Scalar, Tensor};
use crate::error::{ensure, Result};

/// How a BatchNorm layer treats its statistics on a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics normalize the input and are folded into the running
    /// statistics; gradients flow.
    Train,
    /// Running statistics normalize the input; nothing is mutated.
    Eval,
    /// Same statistics as `Train`, but the pass is gradient-free.
    AdaptStats,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

/// Per-channel statistics of one batch, as folded into running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    /// Unbiased (Bessel-corrected) variance.
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::of(DEFAULT_MOMENTUM),
            eps: T::of(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn fold(&mut self, stats: &BatchStats<T>, momentum: T) -> Result<()> {
        fold_running(&mut self.running_mean, &mut self.running_var, stats, momentum)
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: U::of(self.momentum.f64()),
            eps: U::of(self.eps.f64()),
        }
    }
}

/// Exponential moving average update of a layer's running statistics.
pub fn fold_running<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: T,
) -> Result<()> {
    let channels = running_mean.len();
    ensure!(
        stats.mean.len() == channels && stats.var.len() == channels && running_var.len() == channels,
        "batch statistics have {} channels, layer has {}",
        stats.mean.len(),
        channels
    );
    ensure!(
        momentum >= T::zero() && momentum <= T::one(),
        "momentum must lie in [0, 1], got {}",
        momentum
    );
    let keep = T::one() - momentum;
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + momentum * v;
    }
    Ok(())
}
