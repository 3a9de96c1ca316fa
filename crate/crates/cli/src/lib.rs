//! Experiment orchestration for the `dynode` binary: configuration, one
//! function per subcommand, and seed fan-out over a bounded thread pool.

pub mod commands;
pub mod config;

pub use commands::{collect, eval, fig3_svg, repro, rl, train_models, ReproTarget, RunPaths};
pub use config::ExperimentConfig;

use dynode_core::Error;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Io(_) => exit::IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Format { .. } => CliError::Io(msg),
            ref other if other.is_numeric() => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

/// Worker threads for seed fan-out: `DYNODE_THREADS` if set, else the
/// available parallelism.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var("DYNODE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("DYNODE_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
