//! Configuration and orchestration behind the `fwave` binary.

pub mod config;
pub mod run;

pub use config::{Experiment, RunConfig};
pub use run::{execute, exit_code, Manifest};
