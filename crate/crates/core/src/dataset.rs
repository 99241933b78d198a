//! Long-format clustered data: loading, validation, derived columns and the
//! per-cluster row index.
//!
//! Rows are always held sorted by cluster (stable within a cluster), so every
//! cluster occupies one contiguous span of rows. Missing numeric values are
//! stored as `NaN`; rows carrying them are kept here and dropped only when a
//! model that uses the column is built.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// `NaN` marks a missing value.
    Numeric(Vec<f64>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Numeric(_) => ColumnKind::Numeric,
            Column::Categorical(_) => ColumnKind::Categorical,
        }
    }

    fn permuted(&self, order: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(order.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(order.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }

    fn is_missing(&self, row: usize) -> bool {
        match self {
            Column::Numeric(v) => v[row].is_nan(),
            Column::Categorical(v) => v[row].is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column-type declarations for [`load_long_csv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub columns: Vec<ColumnDecl>,
    pub cluster: String,
    pub occasion: Option<String>,
}

impl Schema {
    pub fn new(cluster: impl Into<String>) -> Self {
        Self {
            columns: Vec::new(),
            cluster: cluster.into(),
            occasion: None,
        }
    }

    pub fn numeric(mut self, name: impl Into<String>) -> Self {
        self.columns.push(ColumnDecl {
            name: name.into(),
            kind: ColumnKind::Numeric,
        });
        self
    }

    pub fn categorical(mut self, name: impl Into<String>) -> Self {
        self.columns.push(ColumnDecl {
            name: name.into(),
            kind: ColumnKind::Categorical,
        });
        self
    }

    /// Declares an integer occasion column. It is also loaded as a numeric column.
    pub fn occasion(mut self, name: impl Into<String>) -> Self {
        let name = name.into();
        if !self.columns.iter().any(|c| c.name == name) {
            self.columns.push(ColumnDecl {
                name: name.clone(),
                kind: ColumnKind::Numeric,
            });
        }
        self.occasion = Some(name);
        self
    }

    /// Builds a schema from the file itself: a column is numeric when every
    /// non-missing field parses as a decimal float, categorical otherwise.
    pub fn infer(path: impl AsRef<Path>, cluster: &str, occasion: Option<&str>) -> Result<Schema> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::infer_from_reader(file, cluster, occasion)
    }

    pub fn infer_from_reader<R: Read>(
        reader: R,
        cluster: &str,
        occasion: Option<&str>,
    ) -> Result<Schema> {
        let mut rdr = csv_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        let mut numeric = vec![true; headers.len()];
        for record in rdr.records() {
            let record = record.map_err(csv_error)?;
            for (i, field) in record.iter().enumerate() {
                if numeric[i] && !is_missing(field) && parse_decimal(field).is_none() {
                    numeric[i] = false;
                }
            }
        }
        let mut schema = Schema::new(cluster);
        for (i, name) in headers.iter().enumerate() {
            if name == cluster {
                continue;
            }
            schema = if numeric[i] {
                schema.numeric(name)
            } else {
                schema.categorical(name)
            };
        }
        if let Some(occ) = occasion {
            schema = schema.occasion(occ);
        }
        Ok(schema)
    }
}

/// A long-format table of observations with a level-2 identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: IndexMap<String, Column>,
    cluster_column: String,
    cluster_labels: Vec<String>,
    row_cluster: Vec<usize>,
    occasion_column: Option<String>,
    excluded_rows: usize,
}

/// Contiguous row spans of each cluster in a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub clusters: Vec<String>,
    pub row_ranges: Vec<Range<usize>>,
    pub cluster_sizes: Vec<usize>,
}

impl GroupIndex {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_rows(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }
}

impl Dataset {
    /// Assembles a dataset from raw columns. Rows with a missing cluster label
    /// are excluded and counted; remaining rows are stably sorted by cluster.
    pub fn from_columns(
        cluster_column: impl Into<String>,
        cluster_values: Vec<Option<String>>,
        columns: Vec<(String, Column)>,
        occasion_column: Option<String>,
    ) -> Result<Dataset> {
        let cluster_column = cluster_column.into();
        let n = cluster_values.len();
        for (name, col) in &columns {
            if col.len() != n {
                return Err(Error::Data(format!(
                    "column '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
            if name == &cluster_column {
                return Err(Error::Schema(format!(
                    "cluster column '{name}' supplied twice"
                )));
            }
            if let Column::Numeric(v) = col {
                if let Some(i) = v.iter().position(|x| x.is_infinite()) {
                    return Err(Error::Data(format!(
                        "column '{name}' row {} is not finite",
                        i + 1
                    )));
                }
            }
        }

        let kept: Vec<usize> = (0..n).filter(|&i| cluster_values[i].is_some()).collect();
        let excluded_rows = n - kept.len();
        if kept.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }

        let distinct: BTreeSet<&str> = kept
            .iter()
            .map(|&i| cluster_values[i].as_deref().unwrap())
            .collect();
        let mut cluster_labels: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
        sort_labels(&mut cluster_labels);
        let position: HashMap<&str, usize> = cluster_labels
            .iter()
            .enumerate()
            .map(|(k, l)| (l.as_str(), k))
            .collect();

        let mut order = kept;
        let key = |i: usize| position[cluster_values[i].as_deref().unwrap()];
        order.sort_by_key(|&i| key(i));
        let row_cluster: Vec<usize> = order.iter().map(|&i| key(i)).collect();

        let mut map = IndexMap::new();
        let sorted_labels: Vec<Option<String>> =
            order.iter().map(|&i| cluster_values[i].clone()).collect();
        map.insert(cluster_column.clone(), Column::Categorical(sorted_labels));
        for (name, col) in columns {
            map.insert(name, col.permuted(&order));
        }

        let ds = Dataset {
            columns: map,
            cluster_column,
            cluster_labels,
            row_cluster,
            occasion_column,
            excluded_rows,
        };
        ds.validate_occasions()?;
        Ok(ds)
    }

    fn validate_occasions(&self) -> Result<()> {
        let Some(occ) = &self.occasion_column else {
            return Ok(());
        };
        let values = self.numeric(occ)?;
        for (i, &v) in values.iter().enumerate() {
            if v.is_nan() || v.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "occasion column '{occ}' row {} must hold an integer",
                    i + 1
                )));
            }
            if i > 0 && self.row_cluster[i] == self.row_cluster[i - 1] && v <= values[i - 1] {
                let label = &self.cluster_labels[self.row_cluster[i]];
                return Err(Error::Data(format!(
                    "occasions in cluster '{label}' are duplicated or not increasing ({} then {v})",
                    values[i - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.row_cluster.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    /// Rows dropped at load time because the cluster label was missing.
    pub fn excluded_rows(&self) -> usize {
        self.excluded_rows
    }

    pub fn cluster_column(&self) -> &str {
        &self.cluster_column
    }

    pub fn occasion_column(&self) -> Option<&str> {
        self.occasion_column.as_deref()
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Cluster index (into [`Dataset::cluster_labels`]) of each row.
    pub fn row_clusters(&self) -> &[usize] {
        &self.row_cluster
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(Error::Type(format!("column '{name}' is not numeric"))),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[Option<String>]> {
        match self.column(name)? {
            Column::Categorical(v) => Ok(v),
            Column::Numeric(_) => Err(Error::Type(format!("column '{name}' is not categorical"))),
        }
    }

    /// Number of rows where `name` is missing.
    pub fn missing_count(&self, name: &str) -> Result<usize> {
        let col = self.column(name)?;
        Ok((0..col.len()).filter(|&i| col.is_missing(i)).count())
    }

    /// Sorted distinct non-missing levels of a categorical column.
    pub fn levels(&self, name: &str) -> Result<Vec<String>> {
        let set: BTreeSet<&str> = self
            .categorical(name)?
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        Ok(set.into_iter().map(str::to_owned).collect())
    }

    fn with_column(&self, name: String, col: Column) -> Result<Dataset> {
        if self.columns.contains_key(&name) {
            return Err(Error::Config(format!("column '{name}' already exists")));
        }
        let mut out = self.clone();
        out.columns.insert(name, col);
        Ok(out)
    }

    /// Replaces `column` by its z-score (sample variance with divisor n-1).
    pub fn standardize(&self, column: &str) -> Result<Dataset> {
        let values = self.numeric(column)?;
        let present: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        if present.len() < 2 || present.iter().all(|&v| v == present[0]) {
            return Err(Error::DegenerateScale(column.to_owned()));
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        let scaled = values.iter().map(|v| (v - mean) / sd).collect();
        let mut out = self.clone();
        out.columns[column] = Column::Numeric(scaled);
        Ok(out)
    }

    /// Name given to the column appended by [`Dataset::cluster_mean`].
    pub fn cluster_mean_name(column: &str) -> String {
        format!("mean_{column}")
    }

    /// Appends `mean_<column>`: each row receives the mean of `column` over its
    /// cluster (missing values ignored).
    pub fn cluster_mean(&self, column: &str) -> Result<Dataset> {
        let values = self.numeric(column)?;
        let j = self.n_clusters();
        let mut sum = vec![0.0; j];
        let mut count = vec![0usize; j];
        for (&v, &c) in values.iter().zip(&self.row_cluster) {
            if !v.is_nan() {
                sum[c] += v;
                count[c] += 1;
            }
        }
        let means: Vec<f64> = self
            .row_cluster
            .iter()
            .map(|&c| {
                if count[c] == 0 {
                    f64::NAN
                } else {
                    sum[c] / count[c] as f64
                }
            })
            .collect();
        self.with_column(Self::cluster_mean_name(column), Column::Numeric(means))
    }

    /// Appends one 0/1 indicator `<column>_<level>` per non-reference level,
    /// levels in lexicographic order. Missing categories stay missing.
    pub fn encode_categorical(&self, column: &str, reference: &str) -> Result<Dataset> {
        let levels = self.levels(column)?;
        if !levels.iter().any(|l| l == reference) {
            return Err(Error::Config(format!(
                "reference level '{reference}' not found in column '{column}'"
            )));
        }
        let values = self.categorical(column)?.to_vec();
        let mut out = self.clone();
        for level in levels.iter().filter(|l| *l != reference) {
            let indicator = values
                .iter()
                .map(|v| match v {
                    None => f64::NAN,
                    Some(v) if v == level => 1.0,
                    Some(_) => 0.0,
                })
                .collect();
            out = out.with_column(format!("{column}_{level}"), Column::Numeric(indicator))?;
        }
        Ok(out)
    }

    /// Appends the elementwise product `<a>:<b>`.
    pub fn interaction(&self, a: &str, b: &str) -> Result<Dataset> {
        let xa = self.numeric(a)?;
        let xb = self.numeric(b)?;
        let prod = xa.iter().zip(xb).map(|(x, y)| x * y).collect();
        self.with_column(format!("{a}:{b}"), Column::Numeric(prod))
    }

    pub fn group_index(&self) -> Result<GroupIndex> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        let mut clusters: Vec<String> = Vec::new();
        let mut start = 0;
        for i in 1..=self.n_rows() {
            if i == self.n_rows() || self.row_cluster[i] != self.row_cluster[start] {
                let c = self.row_cluster[start];
                if i < self.n_rows() && self.row_cluster[i] < c {
                    return Err(Error::Internal(
                        "dataset rows are not sorted by cluster".into(),
                    ));
                }
                clusters.push(self.cluster_labels[c].clone());
                ranges.push(start..i);
                start = i;
            }
        }
        if clusters.len() != self.n_clusters() {
            return Err(Error::Internal(
                "dataset rows are not sorted by cluster".into(),
            ));
        }
        let cluster_sizes = ranges.iter().map(|r| r.len()).collect();
        Ok(GroupIndex {
            clusters,
            row_ranges: ranges,
            cluster_sizes,
        })
    }

    /// Keeps the rows for which `keep` returns true.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Result<Dataset> {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(i)).collect();
        if rows.is_empty() {
            return Err(Error::Data("dataset is empty after filtering".into()));
        }
        let clusters: Vec<Option<String>> = rows
            .iter()
            .map(|&i| Some(self.cluster_labels[self.row_cluster[i]].clone()))
            .collect();
        let cols = self
            .columns
            .iter()
            .filter(|(name, _)| **name != self.cluster_column)
            .map(|(name, col)| (name.clone(), col.permuted(&rows)))
            .collect();
        let mut out = Dataset::from_columns(
            self.cluster_column.clone(),
            clusters,
            cols,
            self.occasion_column.clone(),
        )?;
        out.excluded_rows = self.excluded_rows;
        Ok(out)
    }

    /// Writes the dataset in the loader's CSV dialect (missing as `NA`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.keys()).map_err(csv_error)?;
        let mut record: Vec<String> = Vec::with_capacity(self.columns.len());
        for row in 0..self.n_rows() {
            record.clear();
            for col in self.columns.values() {
                record.push(match col {
                    Column::Numeric(v) if v[row].is_nan() => "NA".to_owned(),
                    Column::Numeric(v) => format!("{}", v[row]),
                    Column::Categorical(v) => v[row].clone().unwrap_or_else(|| "NA".to_owned()),
                });
            }
            w.write_record(&record).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a long-format CSV file.
pub fn load_long_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_long_csv(file, schema)
}

pub fn read_long_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}' (not in header)")))
    };
    let cluster_idx = find(&schema.cluster)?;
    let decl_idx: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<_>>()?;

    let mut clusters: Vec<Option<String>> = Vec::new();
    let mut cols: Vec<Column> = schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Numeric => Column::Numeric(Vec::new()),
            ColumnKind::Categorical => Column::Categorical(Vec::new()),
        })
        .collect();

    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let label = field(cluster_idx);
        clusters.push((!is_missing(label)).then(|| label.to_owned()));
        for (col, &idx) in cols.iter_mut().zip(&decl_idx) {
            let raw = field(idx);
            match col {
                Column::Numeric(v) => {
                    if is_missing(raw) {
                        v.push(f64::NAN);
                    } else {
                        let x = parse_decimal(raw).ok_or_else(|| Error::Parse {
                            line,
                            message: format!(
                                "column '{}': '{raw}' is not a decimal number",
                                headers.get(idx).unwrap_or("?")
                            ),
                        })?;
                        v.push(x);
                    }
                }
                Column::Categorical(v) => {
                    v.push((!is_missing(raw)).then(|| raw.to_owned()));
                }
            }
        }
    }

    let named = schema
        .columns
        .iter()
        .map(|c| c.name.clone())
        .zip(cols)
        .collect();
    Dataset::from_columns(
        schema.cluster.clone(),
        clusters,
        named,
        schema.occasion.clone(),
    )
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field == "NA"
}

/// Accepts `[+-]digits[.digits][e[+-]digits]`; rejects `inf`, `nan` and hex.
fn parse_decimal(field: &str) -> Option<f64> {
    let ok = field
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'))
        && field.bytes().any(|b| b.is_ascii_digit());
    if !ok {
        return None;
    }
    field.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Orders labels numerically when every label is a number, lexicographically otherwise.
pub(crate) fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| parse_decimal(l)).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            let (x, y) = (parse_decimal(a).unwrap(), parse_decimal(b).unwrap());
            x.partial_cmp(&y)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.cmp(b))
        });
    } else {
        labels.sort();
    }
}
