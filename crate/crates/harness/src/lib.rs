//! Experiment harness for platoon training: grid runs, summaries, evaluation, rendering.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod render;
pub mod summary;
pub mod trace;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
