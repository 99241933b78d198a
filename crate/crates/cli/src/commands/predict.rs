use std::path::PathBuf;

use clap::Args;
use hierarch::prediction::{
    caterpillar, cluster_lines, write_caterpillar_csv, write_lines_csv, Grid,
};
use hierarch::{build_design, Error, FitResult, Result};

use crate::data::{load, read_json, write_with};
use crate::DataArgs;

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// JSON written by `hierarch fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Caterpillar (league table) CSV output.
    #[arg(long)]
    pub caterpillar: Option<PathBuf>,
    /// Cluster-specific lines CSV output; needs `--grid`.
    #[arg(long, requires = "grid")]
    pub lines: Option<PathBuf>,
    /// Grid values, e.g. `t=0,0.2,0.4`; repeat for several columns of equal length.
    #[arg(long, value_name = "COLUMN=V1,V2,...")]
    pub grid: Vec<String>,
    /// Coverage of the prediction intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

fn parse_grid(specs: &[String]) -> Result<Grid> {
    let mut grid = Grid::default();
    for s in specs {
        let (col, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--grid expects COLUMN=V1,V2,..., got '{s}'")))?;
        let values = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("grid value '{v}' is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        grid.columns.insert(col.trim().to_owned(), values);
    }
    Ok(grid)
}

pub fn run(args: PredictArgs) -> Result<()> {
    if args.caterpillar.is_none() && args.lines.is_none() {
        return Err(Error::Config(
            "nothing to do: give --caterpillar and/or --lines".into(),
        ));
    }
    let fit: FitResult = read_json(&args.fit)?;
    let ds = load(&args.data, Some(&fit.spec))?;
    let dm = build_design(&ds, &fit.spec)?;
    let rows = caterpillar(&fit, &dm, args.level)?;
    let lines = match &args.lines {
        Some(_) => Some(cluster_lines(&fit, &dm, &parse_grid(&args.grid)?)?),
        None => None,
    };
    if let Some(path) = &args.caterpillar {
        write_with(path, |w| write_caterpillar_csv(&rows, w))?;
    }
    if let (Some(path), Some(lines)) = (&args.lines, &lines) {
        write_with(path, |w| write_lines_csv(lines, w))?;
    }
    let separable = rows.iter().filter(|r| r.separable).count();
    println!(
        "clusters: {}, intervals excluding zero: {separable}, overlapping zero: {}",
        rows.len(),
        rows.len() - separable
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid(&["t=0, 0.5,1".into(), "x=1,1,1".into()]).unwrap();
        assert_eq!(g.columns["t"], vec![0.0, 0.5, 1.0]);
        assert_eq!(g.len(), 3);
        assert!(parse_grid(&["t=".into()]).unwrap().is_empty());
        assert!(parse_grid(&["t".into()]).is_err());
        assert!(parse_grid(&["t=a".into()]).is_err());
    }
}
