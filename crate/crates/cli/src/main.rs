//! `mahaguard` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 3 for
//! numerical failures.

mod args;
mod commands;
mod inputs;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

const THREADS_ENV: &str = "MAHAGUARD_THREADS";

fn configure_threads() -> mahaguard::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            mahaguard::Error::InvalidParams(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| mahaguard::Error::InvalidParams(e.to_string()))
}

fn run(cli: Cli) -> mahaguard::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::GenTask(a) => commands::gen_task(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
