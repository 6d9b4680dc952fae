use std::process::ExitCode;

use clap::Parser;
use ranger_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match ranger_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
