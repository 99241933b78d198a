use std::path::PathBuf;

use clap::{Args, ValueEnum};
use hierarch::simulate::{completeness, simulate, SimulationParams};
use hierarch::{Error, Result};

use crate::data::{read_json, write_with};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 180 children, six occasions, half treated, default dropout.
    Trial,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation parameters as JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Replaces the seed in the parameters.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the effective parameters as JSON.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

fn set_seed(p: &mut SimulationParams, seed: u64) {
    match p {
        SimulationParams::Longitudinal(l) => l.seed = seed,
        SimulationParams::Clustered(c) => c.seed = seed,
    }
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let mut params: SimulationParams = match (&args.params, args.preset) {
        (Some(path), _) => read_json(path)?,
        (None, Some(Preset::Trial)) => SimulationParams::tutoring_trial(0),
        (None, None) => return Err(Error::Config("--params or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        set_seed(&mut params, seed);
    }
    params.validate()?;
    let ds = simulate(&params)?;
    write_with(&args.out, |w| ds.write_csv(w))?;
    if let Some(path) = &args.params_out {
        crate::data::write_json(path, &params)?;
    }

    let summary = match &params {
        SimulationParams::Longitudinal(p) => {
            let c = completeness(&ds, p.times.len())?;
            format!(
                "clusters: {}, rows: {}, complete: {} ({:.1}%)",
                c.clusters,
                c.rows,
                c.complete,
                100.0 * c.fraction_complete
            )
        }
        SimulationParams::Clustered(_) => {
            format!(
                "clusters: {}, rows: {}, complete: 100.0%",
                ds.n_clusters(),
                ds.n_rows()
            )
        }
    };
    println!("{summary}");
    Ok(())
}
