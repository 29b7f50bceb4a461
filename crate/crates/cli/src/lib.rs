//! Experiment runner for predictive-coding network training: config
//! parsing, architecture presets, the training loop for the PC variants
//! and the backprop baseline, gradient checking, and metric/trace export.

pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod presets;
pub mod runner;

pub use config::{Algo, BnMode, DatasetKind, ExperimentConfig};
pub use error::{CliError, Result};
pub use runner::{evaluate, run_experiment, MetricsRecord, RunOutput};
