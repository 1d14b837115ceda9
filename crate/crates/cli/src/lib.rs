//! Command-line workflows for the adaptive visual model: synthetic data,
//! pretraining, adaptation, evaluation, parameter accounting and ablation.

pub mod commands;
pub mod config;
mod error;
pub mod svg;

pub use error::{CliError, Result};
