use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = lastlayer_cli::Cli::parse();
    match lastlayer_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
