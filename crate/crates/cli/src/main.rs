use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = caricature_cli::Cli::parse();
    match caricature_cli::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", caricature_cli::error_line(&e));
            ExitCode::from(1)
        }
    }
}
