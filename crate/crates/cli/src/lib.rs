//! Command-line driver over `adaptkit-core`: one config file describes a
//! run, and the `adapt`, `eval`, `probe`, `sweep` and `report` commands
//! write their outputs with content-hash manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod lab;
pub mod manifest;

pub use adaptkit_core as core;
pub use commands::{cmd_adapt, cmd_eval, cmd_probe, cmd_report, cmd_sweep, Overrides};
pub use config::{Axis, ExperimentConfig, SweepSpec};
pub use error::CliError;
pub use lab::Lab;
