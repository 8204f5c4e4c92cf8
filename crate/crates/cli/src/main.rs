//! `bccseg`: synthetic data, training, prediction, evaluation and op counts.
//!
//! Exit status is 0 on success, 1 for invalid flags or inputs (reported
//! before any file is written) and 2 for failures after work has started.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Failure class deciding the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Tags an error as invalid input or as a runtime failure.
pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    let first = e.to_string();
                    let first = first.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                    eprintln!("{}", single_line(first));
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Ops(a) => commands::ops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", single_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", single_line(&format!("{e:#}")));
            ExitCode::from(2)
        }
    }
}
