mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use momae_core::pipeline::Stage;
use momae_core::Error;

use crate::commands::Cli;

/// Error carrying the process exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: Self::NUMERIC,
            message: message.into(),
        }
    }

    /// Classifies a library error, prefixing the flag or file it concerns.
    pub fn from_core(context: &str, e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::DegeneratePlan(_) => Self::USAGE,
            Error::TrainingDivergence { .. } => Self::NUMERIC,
            Error::DegenerateInput(_)
            | Error::Index { .. }
            | Error::Shape { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::Length { .. }
            | Error::CheckpointCorrupt(_)
            | Error::CheckpointIncompatible(_)
            | Error::Io { .. } => Self::DATA,
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Adds parameter defaults for the stage to each training flag's help.
fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, stage) in [("pretrain", Stage::Pretrain), ("finetune", Stage::Finetune)] {
        cmd = cmd.mut_subcommand(name, |mut sub| {
            let ids: Vec<String> = sub
                .get_arguments()
                .map(|a| a.get_id().to_string())
                .collect();
            for id in ids {
                if let Some(d) = config::default_text(stage, &id) {
                    sub = sub.mut_arg(id, |a| {
                        let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
                        a.help(format!("{help} [default: {d}]"))
                    });
                }
            }
            sub
        });
    }
    cmd
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MOMAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::usage(format!(
            "MOMAE_THREADS: expected a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("MOMAE_THREADS: {e}")))
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(CliError::USAGE);
        }
    };
    let result = configure_threads().and_then(|()| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
