//! Masked-condition flow matching for log-Mel speech features.

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
