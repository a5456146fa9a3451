//! Numerical core of the small-data compression workbench.
//!
//! Everything here is `no_std` + `alloc`: a reverse-mode autodiff tensor
//! library, an XLM-R style token-classification encoder and its trainer,
//! CoNLL/corpus text handling, unstructured magnitude pruning, knowledge
//! distillation, int8 quantization and entity-level span metrics. File IO,
//! timing and the command line live in the `sdcw` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{EncoderConfig, EncoderModel, TrainSpec};
pub use rng::Rng;
pub use tensor::Tensor;
