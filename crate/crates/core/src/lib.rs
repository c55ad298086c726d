//! Motion representation, capture post-processing and evaluation metrics for
//! music-conditioned dance synthesis.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod synth;
pub mod tensor_file;

pub use error::{Error, Result};
