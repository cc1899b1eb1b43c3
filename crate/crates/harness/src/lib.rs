//! Operational shell around `rce-core`: configuration, experiment
//! protocols, verification suites, sweeps and the `rce-lab` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod stats;
pub mod sweep;
pub mod verify;

pub use cli::cli_dispatch;
pub use config::{ExperimentConfig, Method};
pub use error::{HarnessError, Result};
