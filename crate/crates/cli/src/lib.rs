//! Experiment configs, artifact I/O and the pipeline behind the `odelap`
//! binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use pipeline::Experiment;
