//! Experiment orchestration for the `mri-robust` testbed.
//!
//! A JSON [`config::ExperimentConfig`] drives six stages, each available as
//! a CLI subcommand: `phantom` builds the dataset, `train` fits the learned
//! models, `reconstruct` measures clean quality over an acceleration grid,
//! `attack` runs white-box perturbation sweeps, `transfer` evaluates every
//! source on every target and `report` turns the CSVs into summary tables
//! and SVG plots. [`pipeline::run`] executes all of them.

pub mod config;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::HarnessError;
pub use pipeline::{run, RunRecord};
