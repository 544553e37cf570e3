//! File formats, dataset IO, checkpoints, the training loop and the
//! command-line tool for part-based face transformers.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod trainer;

pub use error::{Error, Result};
