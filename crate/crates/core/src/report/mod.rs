//! Metrics, experiment configuration and the command implementations.

pub mod config;
mod metrics;
pub mod run;

pub use config::{DatasetKind, ExperimentConfig, QuantKind, CORA_DIR_ENV};
pub use metrics::{avg_bits, compression_ratio};
pub use run::{run, Command, RunRecord, Summary};
