//! The `bwe` command: degrade, train, synthesize, evaluate and run a
//! MUSHRA listening test.

pub mod args;
pub mod commands;
pub mod server;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

pub use args::Cli;

/// Exit status 2 for usage errors, 1 for data errors.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 1,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn usage(e: impl std::fmt::Display) -> Self {
        Self::Usage(e.to_string())
    }
}

pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
