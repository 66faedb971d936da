//! Experiment runner for robust teacher-student distillation: config files,
//! desk-scale presets, evaluation protocols and result tables.

pub mod config;
pub mod emit;
pub mod error;
pub mod pipeline;
pub mod presets;
pub mod protocols;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
