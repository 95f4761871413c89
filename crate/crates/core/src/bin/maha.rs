use std::process::ExitCode;

use clap::Parser;
use maha::cli::{error_json, run, Cli};

fn main() -> ExitCode {
    let level = std::env::var("MAHA_LOG_LEVEL").unwrap_or_else(|_| "info".to_string());
    env_logger::Builder::new().parse_filters(&level).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
