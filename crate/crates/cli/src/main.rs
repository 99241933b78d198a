//! `hierarch` command-line front end.

mod commands;
mod data;
mod table;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{compare, fit, predict, simulate};

#[derive(Debug, Parser)]
#[command(
    name = "hierarch",
    version,
    about = "Two-level linear mixed models by maximum likelihood"
)]
struct Cli {
    /// Worker threads for likelihood evaluation (0 = all cores).
    #[arg(long, global = true, env = "HIERARCH_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV file and write the result as JSON.
    Fit(fit::FitArgs),
    /// Generate a synthetic dataset from a parameter file.
    Simulate(simulate::SimulateArgs),
    /// Rank clusters and draw cluster-specific lines from a saved fit.
    Predict(predict::PredictArgs),
    /// Likelihood-ratio test between two nested fits.
    Compare(compare::CompareArgs),
}

/// Options shared by commands that read a data file.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV input.
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Cluster identifier column (defaults to the one named in the model).
    #[arg(long)]
    pub cluster: Option<String>,
    /// Integer occasion column for longitudinal data.
    #[arg(long)]
    pub occasion: Option<String>,
    /// Treat a column as categorical even if every value is numeric.
    #[arg(long = "categorical", value_name = "COLUMN")]
    pub categorical: Vec<String>,
    /// Add 0/1 indicators `<column>_<level>` for every level but REFERENCE.
    #[arg(long = "dummy", value_name = "COLUMN=REFERENCE")]
    pub dummy: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Compare(a) => compare::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let hierarch::Error::NonConvergence { trace, .. } = &e {
                for t in trace.iter().rev().take(5).rev() {
                    eprintln!(
                        "  iteration {:>4}  objective {:.10e}  gradient {:.3e}",
                        t.iteration, t.objective, t.grad_norm
                    );
                }
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
