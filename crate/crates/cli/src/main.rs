//! `scdid` — doubly robust difference-in-differences / synthetic-control
//! ATT estimation on long-format CSV data, with multiplier-bootstrap
//! inference, staggered-adoption event studies, and a Monte Carlo harness.
//!
//! Exit codes: 0 success, 1 data problems, 2 estimation failures (singular
//! systems, underidentified weights, bootstrap breakdown), 3 configuration
//! errors.

mod args;
mod commands;
mod config;
mod report;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; they are not errors.
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Bootstrap(a) => commands::bootstrap(a),
        Command::EventStudy(a) => commands::event_study_cmd(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Validate(a) => commands::validate_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<scdid::Error>() {
        return core.exit_class();
    }
    if err.downcast_ref::<config::ConfigError>().is_some() {
        return 3;
    }
    1
}
