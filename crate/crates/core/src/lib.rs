pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod geometry;
pub mod losses;
pub mod skeleton;
pub mod network;
pub mod datasets;
pub mod corruptions;
pub mod pipeline;
pub mod diagnostics;
