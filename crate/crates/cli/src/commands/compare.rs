use std::path::PathBuf;

use clap::Args;
use hierarch::inference::{lrt, lrt_from_deviances, TestResult};
use hierarch::{Error, FitResult, Result};

use crate::data::read_json;

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Fit of the larger model.
    #[arg(required_unless_present = "deviances", conflicts_with = "deviances")]
    pub full: Option<PathBuf>,
    /// Fit of the nested model.
    #[arg(requires = "full")]
    pub nested: Option<PathBuf>,
    /// Deviances given directly as NESTED,FULL.
    #[arg(long, value_name = "NESTED,FULL", value_delimiter = ',')]
    pub deviances: Option<Vec<f64>>,
    /// Degrees of freedom; defaults to the difference in parameter counts.
    #[arg(long)]
    pub df: Option<usize>,
    /// Halve the p-value for a single variance tested on its boundary.
    #[arg(long)]
    pub boundary: bool,
    /// Print the result as JSON.
    #[arg(long)]
    pub json: bool,
}

fn test(args: &CompareArgs) -> Result<TestResult> {
    if let Some(d) = &args.deviances {
        if d.len() != 2 {
            return Err(Error::Config("--deviances expects NESTED,FULL".into()));
        }
        let df = args
            .df
            .ok_or_else(|| Error::Config("--df is required with --deviances".into()))?;
        return lrt_from_deviances(d[0], d[1], df, args.boundary);
    }
    let (Some(full), Some(nested)) = (&args.full, &args.nested) else {
        return Err(Error::Config("give two fit files or --deviances".into()));
    };
    let full: FitResult = read_json(full)?;
    let nested: FitResult = read_json(nested)?;
    lrt(&full, &nested, args.df, args.boundary)
}

pub fn run(args: CompareArgs) -> Result<()> {
    let t = match test(&args) {
        Err(Error::ConvergenceSuspect(l)) => {
            eprintln!(
                "warning: the larger model has the higher deviance; the models may not be nested"
            );
            return Err(Error::ConvergenceSuspect(l));
        }
        other => other?,
    };
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&t).map_err(|e| Error::Internal(e.to_string()))?
        );
        return Ok(());
    }
    let df = t.df.map_or_else(|| "-".to_owned(), |d| d.to_string());
    println!(
        "L = {:.3}, df = {df}, p = {}",
        t.statistic,
        format_p(t.p_unadjusted)
    );
    if t.boundary_adjusted {
        println!("boundary-adjusted p = {}", format_p(t.p_value));
    }
    Ok(())
}

fn format_p(p: f64) -> String {
    if p > 0.0 && p < 1e-4 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::format_p;

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.00634), "0.0063");
        assert_eq!(format_p(2.5e-110), "2.500e-110");
        assert_eq!(format_p(0.0), "0.0000");
    }
}
