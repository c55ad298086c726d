//! Residual-quantized motion tokenizer and the masked multimodal-condition
//! transformer that generates its tokens.

pub mod error;
pub mod fk;
pub mod mct;
pub mod mkrvq;
pub mod nn;
pub mod quantizer;

pub use error::{ModelError, Result};
