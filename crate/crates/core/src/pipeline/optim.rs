use crate::autodiff::Tensor;
use crate::datasets::{OptimizerConfig, OptimizerKind};
use crate::error::{ensure, Result};
use crate::network::Model;

/// Adam moments for every trainable tensor of one model.
///
/// Weight decay is decoupled: it shrinks the parameter directly instead of
/// being added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    config: OptimizerConfig,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    step: u64,
}

impl OptimState {
    pub fn new(config: &OptimizerConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        let first: Vec<_> = model.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            config: config.clone(),
            second: first.clone(),
            first,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.first, &self.second)
    }

    /// Clears the moments and the step counter.
    pub fn reset(&mut self) {
        for t in self.first.iter_mut().chain(self.second.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        self.step = 0;
    }

    /// One update of `model`'s trainable tensors; `grads` is aligned with
    /// [`Model::parameters`].
    pub fn apply(&mut self, model: &mut Model, grads: &[Tensor<f32>]) -> Result<()> {
        let OptimizerKind::Adam = self.config.kind;
        let params = model.parameters_mut();
        ensure!(
            params.len() == grads.len() && params.len() == self.first.len(),
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.len()
        );
        for (p, g) in params.iter().zip(grads) {
            ensure!(p.shape() == g.shape(), "gradient shape {:?} vs parameter {:?}", g.shape(), p.shape());
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = f64::from(gi);
                let m_new = c.beta1 * f64::from(*mi) + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * f64::from(*vi) + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = (m_new / bias1) / ((v_new / bias2).sqrt() + c.eps) + c.weight_decay * f64::from(*w);
                *w = (f64::from(*w) - c.learning_rate * update) as f32;
            }
        }
        Ok(())
    }
}
