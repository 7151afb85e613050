//! Configuration-driven runner for fibergi experiments.

pub mod commands;
pub mod config;

pub use config::{ConfigError, Experiment, ExperimentConfig};
