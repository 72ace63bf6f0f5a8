//! `splitqos` — train, evaluate, and probe the split-learning QoS
//! forecaster from the command line.
//!
//! Exit codes: `0` success, `1` user error (bad arguments, bad
//! configuration, missing files), `2` internal error. On failure the last
//! stderr line is a machine-readable JSON object:
//! `{"error":{"kind":"user"|"internal","message":"..."}}`.

mod attack;
mod eval;
mod files;
mod gen_data;
mod report;
mod train;
mod util;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "splitqos",
    version,
    about = "Split-learning QoS forecasting: synthetic workloads, distributed \
             training, evaluation, and privacy probes",
    after_help = format!("Set {}=quiet|info|debug to control diagnostics on stderr.", util::LOG_ENV),
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving scenario and store its feature tables.
    GenData(gen_data::GenDataArgs),
    /// Train the distributed deployment (or the single-process reference).
    Train(train::TrainArgs),
    /// Score a checkpoint against the persistence baseline; optionally over TCP.
    Eval(eval::EvalArgs),
    /// Reconstruct private inputs from published context vectors.
    Attack(attack::AttackArgs),
    /// Summarize one or more run directories as a CSV table.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            emit_error_line("user", &e.to_string());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_user_error() { "user" } else { "internal" };
            eprintln!("error: {e}");
            emit_error_line(kind, &e.to_string());
            ExitCode::from(if kind == "user" { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> splitqos::Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Attack(args) => attack::run(args),
        Command::Report(args) => report::run(args),
    }
}

/// The machine-readable failure line: always the last line on stderr.
fn emit_error_line(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}
