//! Experiment harness: configuration, run orchestration, persistence and
//! reports.

pub mod config;
pub mod manifest;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use runner::{run, RunOutcome};
