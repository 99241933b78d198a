use std::path::PathBuf;

use clap::Args;
use hierarch::{fit, Error, FitOptions, ModelSpec, Result};

use crate::data::{load, read_json, write_json};
use crate::table::render;
use crate::DataArgs;

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model specification as JSON, instead of the flags below.
    #[arg(long, conflicts_with_all = ["response", "fixed", "random", "resid"])]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Fixed part, e.g. "1 + t + x + t:x".
    #[arg(long)]
    pub fixed: Option<String>,
    /// Random part, e.g. "1 + t | child".
    #[arg(long)]
    pub random: Option<String>,
    /// Level-1 residual structure: "iid" or "ar1:<occasion column>".
    #[arg(long)]
    pub resid: Option<String>,

    /// Where to write the fit as JSON; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print an estimates table rounded to three decimals.
    #[arg(long)]
    pub table: bool,

    #[arg(long, default_value_t = FitOptions::default().max_iter)]
    pub max_iter: usize,
    #[arg(long, default_value_t = FitOptions::default().grad_tol)]
    pub grad_tol: f64,
    /// Seed for the perturbed restart after a stalled line search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip standard errors.
    #[arg(long)]
    pub no_se: bool,
}

pub fn model_spec(args: &FitArgs) -> Result<ModelSpec> {
    if let Some(path) = &args.spec {
        return read_json(path);
    }
    let missing =
        |flag: &str| Error::Config(format!("--{flag} is required unless --spec is given"));
    ModelSpec::from_flags(
        args.response
            .as_deref()
            .ok_or_else(|| missing("response"))?,
        args.fixed.as_deref().ok_or_else(|| missing("fixed"))?,
        args.random.as_deref().ok_or_else(|| missing("random"))?,
        args.resid.as_deref().unwrap_or("iid"),
    )
}

pub fn run(args: FitArgs) -> Result<()> {
    let spec = model_spec(&args)?;
    let ds = load(&args.data, Some(&spec))?;
    let opts = FitOptions {
        max_iter: args.max_iter,
        grad_tol: args.grad_tol,
        seed: args.seed,
        compute_se: !args.no_se,
        ..FitOptions::default()
    };
    let result = fit(&ds, &spec, &opts)?;
    for w in &result.convergence.warnings {
        eprintln!("warning: {w}");
    }
    match &args.out {
        Some(path) => write_json(path, &result)?,
        None if !args.table => {
            println!(
                "{}",
                serde_json::to_string_pretty(&result)
                    .map_err(|e| Error::Internal(e.to_string()))?
            )
        }
        None => {}
    }
    if args.table {
        print!("{}", render(&result));
    }
    Ok(())
}
