//! Experiment harness for the `errdiag` learners: strict TOML configs, seed
//! fan-out with JSON Lines traces, ablation tables, offline reports and the
//! acceptance suite.

pub mod ablate;
pub mod accept;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod trace_io;

pub use config::{ExperimentKind, RunConfig};
pub use error::{HarnessError, Result};
