use std::process::ExitCode;

use aad_cli::{config::OUT_ENV, execute, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_out = std::env::var(OUT_ENV).ok();
    match execute(&cli, env_out.as_deref(), &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
