//! Partial domain adaptation with selective adversarial networks on small
//! dense problems: a reverse-mode autodiff core, the networks, the weighted
//! losses, a training loop, and an auditor for the class-weight error bound.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use trainer::{run_experiment, MetricsRecord, MetricsTrace, Preset, Variant};
