//! Experiment driver: configuration, artifact files and the studies built on
//! the `apc` library.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod minsamples;
pub mod pipeline;
pub mod study;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, Stage};
