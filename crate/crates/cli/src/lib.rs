//! Experiment orchestration for the quantization laboratory: experiment
//! specs, checkpoint files, the sweep runner and result reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod report;
pub mod sweep;

pub use error::{LabError, Result};
