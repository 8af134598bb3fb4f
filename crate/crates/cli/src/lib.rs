//! Batch runner for the verification suite: configuration loading, the
//! experiment registry and the result writers behind the `smp` binary.

pub mod config;
pub mod registry;
pub mod run;

pub use config::{Check, ExperimentConfig, RawConfig};
pub use registry::{list_experiments, CustomExperiment, Experiment, Registry};
pub use run::{exit_code, run, RunResults, EXIT_ERROR, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS};
