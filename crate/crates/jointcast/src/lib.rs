//! Joint multi-agent trajectory forecasting.
//!
//! A query-centric scene encoder feeds a recurrent joint decoder that emits
//! K futures for all target agents at once, scored as a scene-level Laplace
//! mixture. Training, evaluation, ensembling, and synthetic data generation
//! are exposed both as a library and through the `jointcast` binary.

pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod prediction;
pub mod scene;
pub mod scene_io;
pub mod scoring;
pub mod store;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::run()
}
