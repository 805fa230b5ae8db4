//! Artifact formats, pipeline stages and the command line around
//! [`condadapt_core`].
//!
//! A run lives in one output directory. Every stage of [`pipeline::Pipeline`]
//! reads what earlier stages wrote there and adds its own artifacts:
//! datasets, model checkpoints in the [`container`] format, the parameter
//! memory, and JSON/CSV reports.

pub mod container;
mod error;
pub mod pipeline;
pub mod store;

pub use error::{ContainerError, Error, Result};
pub use pipeline::Pipeline;
