use std::process::ExitCode;

use clap::Parser;
use ethena_ctl_cli::{run, Cli, OUT_DIR_ENV};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_out = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(Into::into);
    match run(&cli.command, env_out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
