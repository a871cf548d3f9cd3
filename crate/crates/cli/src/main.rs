//! `xplan`: every pipeline stage from the command line.
//!
//! Exit codes: 0 on success, 1 on domain failures (no path, invalid
//! artifacts), 2 on usage, config or I/O errors.

mod args;
mod cache;
mod commands;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use args::{split_overrides, Cli};
use commands::{Domain, Usage};

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Domain>().is_some() {
        return 1;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<xplan_core::Error>() {
        Some(e) if e.is_domain() => 1,
        _ => 2,
    }
}

fn write_error_report(out: &Path, command: &str, err: &anyhow::Error, code: u8) {
    let report = serde_json::json!({
        "command": command,
        "exit_code": code,
        "error": format!("{err:#}"),
    });
    if std::fs::create_dir_all(out).is_ok() {
        let _ = std::fs::write(out.join("error.json"), serde_json::to_string_pretty(&report).unwrap_or_default());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(argv.clone()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli.command, argv, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            if code == 1 {
                write_error_report(&cli.command.common().out, cli.command.name(), &err, code);
            }
            ExitCode::from(code)
        }
    }
}
