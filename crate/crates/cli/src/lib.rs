//! The `tdm` command-line tool: synthetic data, masking, imputation,
//! evaluation, theory checks and experiment sweeps.
//!
//! Every command writing into `--output-dir` also writes `manifest.json`,
//! which records the full configuration and SHA-256 digests of all inputs
//! and outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
//! 4 failed check.

use std::ffi::OsString;

use clap::Parser;
use tdm_core::TdmError;

pub mod args;
pub mod commands;
pub mod experiment;
pub mod manifest;

pub use args::Cli;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

/// Environment variable capping worker threads in `experiment`.
pub const THREADS_ENV: &str = "TDM_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] TdmError),
    #[error("{failed} of {total} checks failed")]
    CheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(TdmError::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
            CliError::CheckFailed { .. } => EXIT_CHECK,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
