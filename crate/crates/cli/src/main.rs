use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(bicr_cli::execute(bicr_cli::Cli::parse()))
}
