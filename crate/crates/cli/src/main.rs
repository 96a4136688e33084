use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use firstprune_cli::{run, Cli, EXIT_PARTIAL};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            let body = serde_json::to_string_pretty(&outcome.summary).unwrap_or_default();
            let _ = writeln!(std::io::stdout().lock(), "{body}");
            if outcome.partial {
                ExitCode::from(EXIT_PARTIAL as u8)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(failure) => {
            let _ = writeln!(std::io::stderr().lock(), "{}", failure.to_json());
            ExitCode::from(failure.exit_code as u8)
        }
    }
}
