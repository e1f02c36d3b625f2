//! Experiment harness for the `flowdistill` pipeline: configuration, stages
//! that read and write a run directory, and plot-data export.

pub mod config;
pub mod experiment;
pub mod export;
pub mod rundir;
pub mod stages;

pub use config::ExperimentConfig;
pub use experiment::Workspace;
pub use stages::{run_stage, Stage};
