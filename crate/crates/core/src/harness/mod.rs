//! Experiment orchestration: configuration, the closed-loop engine, sweeps
//! and run artifacts.

pub mod artifacts;
pub mod clock;
pub mod config;
pub mod engine;
pub mod sweep;
pub mod tools;

pub use config::ExperimentConfig;
pub use engine::{run_closed_loop, RunArtifacts};
