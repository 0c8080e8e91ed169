//! Experiment runner for model-stitching studies: configuration, dataset
//! ingestion, checkpoints, the parallel job runner and artifact rendering.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod render;
pub mod runner;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
