//! Command-line entry point. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numeric failure.

mod args;
mod commands;
mod error;
mod parallel;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::TrainCls(a) => commands::train::run_cls(a),
        Command::TrainGrd(a) => commands::train::run_grd(a),
        Command::Infer(a) => commands::infer::run(a, cli.threads),
        Command::Eval(a) => commands::eval::run(a, cli.threads),
        Command::Stats(a) => commands::stats::run(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
