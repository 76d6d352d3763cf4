use std::process::ExitCode;

use clap::Parser;
use efv_cli::args::Cli;

fn main() -> ExitCode {
    match efv_cli::run(Cli::parse()) {
        Ok(status) => status.exit_code(),
        Err(failure) => {
            eprintln!("{}", failure.json_line());
            ExitCode::from(efv_cli::EXIT_INPUT)
        }
    }
}
