//! `recon` command-line harness.
//!
//! Exit codes: 0 on success, 2 for usage, input or format errors, 3 when
//! training diverges.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] recon_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use recon_core::Error as E;
        match self {
            CliError::Core(E::Divergence { .. } | E::NumericalFailure(_)) => 3,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Divide(a) => commands::divide(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
