//! Experiment harness for the diffusion-policy slicing agent: configuration,
//! training runs, exhaustive-search labelling, evaluation and sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

pub mod commands;
pub mod config;
pub mod experiment;

use std::ffi::OsString;

use thiserror::Error;

pub use commands::{run, Cli};
pub use config::{EvalConfig, ExperimentConfig, Method, Preset, SweepConfig};

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "DIFFQL_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    oran_diffql::agent::AgentError,
    oran_diffql::esa::EsaError,
    oran_diffql::esa::DatasetError,
    oran_diffql::metrics::MetricsError,
    oran_diffql::nn::NnError,
    serde_json::Error
);

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
