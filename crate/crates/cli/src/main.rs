//! `pcno`: simulate gas networks, generate datasets, train and evaluate
//! neural operators, and export heatmaps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcno_core::CoreError;
use pcno_gas::GasError;

#[derive(Parser)]
#[command(name = "pcno", version, about = "Physics-informed neural operators for gas networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one schedule and write a dataset plus per-pipe CSV.
    Simulate(commands::SimulateArgs),
    /// Generate random square-wave scenarios.
    GenData(commands::GenDataArgs),
    /// Train a model.
    Train(commands::TrainArgs),
    /// Evaluate checkpoints on test datasets.
    Eval(commands::EvalArgs),
    /// Write CSV matrices and PNG heatmaps of predicted, true and error fields.
    ExportPlots(commands::ExportArgs),
}

/// Failure that is numerical rather than a configuration problem.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>()
            || matches!(e.downcast_ref::<GasError>(), Some(GasError::SolverFailure { .. }))
            || matches!(
                e.downcast_ref::<CoreError>(),
                Some(CoreError::NonFinite { .. } | CoreError::DegenerateNorm(_) | CoreError::Gas(GasError::SolverFailure { .. }))
            )
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    // Usage errors exit 2 in clap; the contract reserves 2 for numerics.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportPlots(a) => commands::export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
