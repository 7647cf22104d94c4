//! Dense tensors with a hand-written reverse-mode tape.

mod batchnorm;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use batchnorm::{fold_running, BatchNormState, BatchStats, BnMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use scalar::{gemm, Scalar, Transpose};
pub use tape::{log_sum_exp, logistic, softplus, Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
