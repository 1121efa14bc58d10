use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tpedit::Cli::parse();
    match tpedit::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(tpedit::exit_code(&e))
        }
    }
}
