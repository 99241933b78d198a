use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use hierarch::dataset::load_long_csv;
use hierarch::{ColumnKind, Dataset, Error, ModelSpec, Residual, Result, Schema};

use crate::DataArgs;

/// Loads the data file with inferred column types, then applies the
/// `--categorical` and `--dummy` options.
pub fn load(args: &DataArgs, spec: Option<&ModelSpec>) -> Result<Dataset> {
    let cluster = args
        .cluster
        .clone()
        .or_else(|| spec.map(|s| s.random.cluster.clone()))
        .ok_or_else(|| Error::Config("--cluster is required".into()))?;
    let occasion = args
        .occasion
        .clone()
        .or_else(|| match spec.map(|s| &s.residual) {
            Some(Residual::Ar1 { occasion }) => Some(occasion.clone()),
            _ => None,
        });
    let mut schema = Schema::infer(&args.data, &cluster, occasion.as_deref())?;
    for name in &args.categorical {
        let decl = schema
            .columns
            .iter_mut()
            .find(|c| &c.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))?;
        decl.kind = ColumnKind::Categorical;
    }
    let mut ds = load_long_csv(&args.data, &schema)?;
    for d in &args.dummy {
        let (column, reference) = d
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--dummy expects COLUMN=REFERENCE, got '{d}'")))?;
        ds = ds.encode_categorical(column.trim(), reference.trim())?;
    }
    Ok(ds)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Serializes fully in memory before touching `path`, so a failure leaves no file behind.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_with(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}
