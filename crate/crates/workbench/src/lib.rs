//! Std side of the small-data compression workbench: model files,
//! experiment configuration, evaluation reports and the command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod persist;
pub mod pipeline;
pub mod report;

pub use error::{WbError, WbResult};
