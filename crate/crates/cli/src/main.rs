mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

const EXIT_VALIDATION: u8 = 1;
const EXIT_BACKEND: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    let result = match &cli.command {
        Command::Certify(a) => commands::certify(&cli, a),
        Command::Evaluate(a) => commands::evaluate(&cli, a),
        Command::SweepK(a) => commands::sweep_k(&cli, a),
        Command::Sequential(a) => commands::sequential(&cli, a),
        Command::Synthetic(a) => commands::synthetic(&cli, a),
        Command::Report(a) => report::run(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { EXIT_BACKEND } else { EXIT_VALIDATION })
        }
    }
}
