//! Model specifications and the per-cluster design blocks built from them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Relative singular-value tolerance below which the fixed design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// One regressor: the constant, a numeric column, or a product of columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    Intercept,
    Column(String),
    Product(Vec<String>),
}

impl Term {
    pub fn column(name: impl Into<String>) -> Self {
        Term::Column(name.into())
    }

    pub fn product(a: impl Into<String>, b: impl Into<String>) -> Self {
        Term::Product(vec![a.into(), b.into()])
    }

    pub fn columns(&self) -> &[String] {
        match self {
            Term::Intercept => &[],
            Term::Column(c) => std::slice::from_ref(c),
            Term::Product(cs) => cs,
        }
    }

    /// Value of the term for one row given a column lookup; `NaN` if any input is missing.
    pub fn evaluate(&self, mut value_of: impl FnMut(&str) -> f64) -> f64 {
        match self {
            Term::Intercept => 1.0,
            Term::Column(c) => value_of(c),
            Term::Product(cs) => cs.iter().map(|c| value_of(c)).product(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("1"),
            Term::Column(c) => f.write_str(c),
            Term::Product(cs) => f.write_str(&cs.join(":")),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::Intercept);
        }
        if s.is_empty() || s.contains(['+', '|', ' ', '(', ')']) {
            return Err(Error::Spec(format!("invalid term '{s}'")));
        }
        if s.contains(':') {
            let parts: Vec<String> = s.split(':').map(|p| p.trim().to_owned()).collect();
            if parts.iter().any(|p| p.is_empty() || p == "1") {
                return Err(Error::Spec(format!("invalid product term '{s}'")));
            }
            return Ok(Term::Product(parts));
        }
        Ok(Term::Column(s.to_owned()))
    }
}

impl TryFrom<String> for Term {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Residual {
    Iid,
    Ar1 { occasion: String },
}

impl Residual {
    pub fn is_ar1(&self) -> bool {
        matches!(self, Residual::Ar1 { .. })
    }
}

impl FromStr for Residual {
    type Err = Error;

    /// `iid` or `ar1:<occasion column>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "iid" {
            return Ok(Residual::Iid);
        }
        match s.split_once(':') {
            Some(("ar1", occ)) if !occ.trim().is_empty() => Ok(Residual::Ar1 {
                occasion: occ.trim().to_owned(),
            }),
            _ => Err(Error::Spec(format!(
                "residual structure must be 'iid' or 'ar1:<occasion>', got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomPart {
    pub cluster: String,
    pub terms: Vec<Term>,
}

/// Response, fixed terms, random terms over the cluster, and residual structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub fixed: Vec<Term>,
    pub random: RandomPart,
    pub residual: Residual,
}

fn parse_terms(s: &str) -> Result<Vec<Term>> {
    s.split('+').map(str::parse).collect()
}

impl ModelSpec {
    /// Random-intercept model `response ~ fixed + (1 | cluster)`.
    pub fn random_intercept(
        response: impl Into<String>,
        fixed: Vec<Term>,
        cluster: impl Into<String>,
    ) -> Self {
        Self {
            response: response.into(),
            fixed,
            random: RandomPart {
                cluster: cluster.into(),
                terms: vec![Term::Intercept],
            },
            residual: Residual::Iid,
        }
    }

    /// Builds a spec from the command-line mini-language:
    /// `fixed = "1 + t + x + t:x"`, `random = "1 + t | child"`, `resid = "iid" | "ar1:occ"`.
    pub fn from_flags(response: &str, fixed: &str, random: &str, resid: &str) -> Result<Self> {
        let (terms, cluster) = random
            .split_once('|')
            .ok_or_else(|| Error::Spec(format!("random part '{random}' lacks '| cluster'")))?;
        let cluster = cluster.trim();
        if cluster.is_empty() {
            return Err(Error::Spec("random part names no cluster".into()));
        }
        let spec = ModelSpec {
            response: response.trim().to_owned(),
            fixed: parse_terms(fixed)?,
            random: RandomPart {
                cluster: cluster.to_owned(),
                terms: parse_terms(terms)?,
            },
            residual: resid.parse()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_residual(mut self, residual: Residual) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed.is_empty() {
            return Err(Error::Spec("no fixed terms".into()));
        }
        if self.random.terms.is_empty() {
            return Err(Error::Spec("no random terms".into()));
        }
        for (list, what) in [(&self.fixed, "fixed"), (&self.random.terms, "random")] {
            for (i, t) in list.iter().enumerate() {
                if list[..i].contains(t) {
                    return Err(Error::Spec(format!("duplicate {what} term '{t}'")));
                }
            }
        }
        for t in &self.random.terms {
            if !self.fixed.contains(t) {
                return Err(Error::Spec(format!(
                    "random term '{t}' has no corresponding fixed term"
                )));
            }
        }
        Ok(())
    }

    pub fn has_intercept(&self) -> bool {
        self.fixed.contains(&Term::Intercept)
    }

    /// Canonical one-line rendering, e.g. `y ~ 1 + t + (1 + t | child), resid = ar1(occ)`.
    pub fn describe(&self) -> String {
        let join = |ts: &[Term]| {
            ts.iter()
                .map(Term::to_string)
                .collect::<Vec<_>>()
                .join(" + ")
        };
        let mut out = format!(
            "{} ~ {} + ({} | {})",
            self.response,
            join(&self.fixed),
            join(&self.random.terms),
            self.random.cluster
        );
        if let Residual::Ar1 { occasion } = &self.residual {
            out.push_str(&format!(", resid = ar1({occasion})"));
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Response, fixed design and random design of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub label: String,
    /// Dataset row of each observation in this block.
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Integer occasion of each observation; empty when the data carry none.
    pub occasions: Vec<i64>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub clusters: Vec<ClusterBlock>,
    pub fixed_labels: Vec<String>,
    pub random_labels: Vec<String>,
    /// Position of each random term among the fixed terms.
    pub random_in_fixed: Vec<usize>,
    pub ar1: bool,
    pub n_obs: usize,
    /// Rows excluded because the response or a used covariate was missing.
    pub n_dropped: usize,
}

impl DesignMatrices {
    pub fn p(&self) -> usize {
        self.fixed_labels.len()
    }

    pub fn q(&self) -> usize {
        self.random_labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Fixed-effect design stacked over clusters.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs, self.p());
        let mut r = 0;
        for b in &self.clusters {
            x.rows_mut(r, b.len()).copy_from(&b.x);
            r += b.len();
        }
        x
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_obs,
            self.clusters.iter().flat_map(|b| b.y.iter().copied()),
        )
    }

    /// Same design with every response multiplied by `k` and shifted by `c`.
    pub fn with_affine_response(&self, k: f64, c: f64) -> DesignMatrices {
        let mut out = self.clone();
        for b in &mut out.clusters {
            b.y.apply(|v| *v = k * *v + c);
        }
        out
    }
}

/// Assembles per-cluster `y_j`, `X_j`, `Z_j` for `spec` over `ds`.
pub fn build_design(ds: &Dataset, spec: &ModelSpec) -> Result<DesignMatrices> {
    spec.validate()?;
    if spec.random.cluster != ds.cluster_column() {
        return Err(Error::Spec(format!(
            "model clusters on '{}' but the dataset is grouped by '{}'",
            spec.random.cluster,
            ds.cluster_column()
        )));
    }

    let response = ds.numeric(&spec.response)?;
    let mut used: Vec<&str> = Vec::new();
    for t in &spec.fixed {
        for c in t.columns() {
            ds.numeric(c)?;
            if !used.contains(&c.as_str()) {
                used.push(c);
            }
        }
    }
    let lookup: Vec<(&str, &[f64])> = used
        .iter()
        .map(|&c| Ok((c, ds.numeric(c)?)))
        .collect::<Result<_>>()?;
    let value = |row: usize, name: &str| -> f64 {
        lookup
            .iter()
            .find(|(c, _)| *c == name)
            .map_or(f64::NAN, |(_, v)| v[row])
    };

    let occasion_name = match &spec.residual {
        Residual::Ar1 { occasion } => Some(occasion.as_str()),
        Residual::Iid => ds.occasion_column(),
    };
    let occasions = match occasion_name {
        Some(name) => Some(ds.numeric(name).map_err(|_| {
            Error::Spec(format!(
                "occasion column '{name}' is missing or not numeric"
            ))
        })?),
        None => None,
    };

    let p = spec.fixed.len();
    let random_in_fixed: Vec<usize> = spec
        .random
        .terms
        .iter()
        .map(|t| spec.fixed.iter().position(|f| f == t).unwrap())
        .collect();

    let index = ds.group_index()?;
    let mut clusters = Vec::with_capacity(index.n_clusters());
    let mut n_obs = 0;
    let mut n_dropped = 0;
    for (label, range) in index.clusters.iter().zip(&index.row_ranges) {
        let mut rows = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        for row in range.clone() {
            let xrow: Vec<f64> = spec
                .fixed
                .iter()
                .map(|t| t.evaluate(|c| value(row, c)))
                .collect();
            let occ_missing = spec.residual.is_ar1() && occasions.is_some_and(|o| o[row].is_nan());
            if response[row].is_nan() || xrow.iter().any(|v| v.is_nan()) || occ_missing {
                n_dropped += 1;
                continue;
            }
            rows.push(row);
            xs.extend(xrow);
        }
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        let z = x.select_columns(&random_in_fixed);
        let y = DVector::from_iterator(n, rows.iter().map(|&r| response[r]));
        let occ: Vec<i64> = match occasions {
            Some(o) => rows
                .iter()
                .map(|&r| {
                    let v = o[r];
                    if v.fract() != 0.0 {
                        Err(Error::Data(format!(
                            "occasion '{v}' in cluster '{label}' is not an integer"
                        )))
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        if spec.residual.is_ar1() && occ.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "occasions in cluster '{label}' are duplicated or not increasing"
            )));
        }
        n_obs += n;
        clusters.push(ClusterBlock {
            label: label.clone(),
            rows,
            y,
            x,
            z,
            occasions: occ,
        });
    }
    if clusters.is_empty() {
        return Err(Error::Data("no complete rows remain for this model".into()));
    }

    let dm = DesignMatrices {
        clusters,
        fixed_labels: spec.fixed.iter().map(Term::to_string).collect(),
        random_labels: spec.random.terms.iter().map(Term::to_string).collect(),
        random_in_fixed,
        ar1: spec.residual.is_ar1(),
        n_obs,
        n_dropped,
    };
    check_rank(&dm)?;
    Ok(dm)
}

/// Rejects a stacked fixed design whose singular values fall below
/// `RANK_TOLERANCE` relative to the largest, naming the first offending term.
fn check_rank(dm: &DesignMatrices) -> Result<()> {
    let x = dm.stacked_x();
    let full_rank = |k: usize| {
        let sv = x.columns(0, k).into_owned().singular_values();
        let max = sv.max();
        max > 0.0 && sv.min() > RANK_TOLERANCE * max && dm.n_obs >= k
    };
    if full_rank(dm.p()) {
        return Ok(());
    }
    let bad = (1..=dm.p()).find(|&k| !full_rank(k)).unwrap_or(dm.p());
    Err(Error::Collinearity {
        term: dm.fixed_labels[bad - 1].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Column;

    fn rct_like() -> Dataset {
        let mut child = Vec::new();
        let mut t = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for j in 0..4 {
            for k in 0..3 {
                child.push(Some(format!("{j}")));
                t.push(k as f64 * 0.5);
                x.push((j % 2) as f64);
                y.push(j as f64 + k as f64 * 0.7 + (j * k) as f64 * 0.1);
            }
        }
        Dataset::from_columns(
            "child",
            child,
            vec![
                ("t".into(), Column::Numeric(t)),
                ("x".into(), Column::Numeric(x)),
                ("y".into(), Column::Numeric(y)),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn describe_renderings() {
        let null = ModelSpec::from_flags("y", "1", "1 | cluster", "iid").unwrap();
        assert_eq!(null.describe(), "y ~ 1 + (1 | cluster)");
        let slope = ModelSpec::from_flags("y", "1 + t", "1 + t | cluster", "iid").unwrap();
        assert_eq!(slope.describe(), "y ~ 1 + t + (1 + t | cluster)");
        let ar = ModelSpec::from_flags("y", "1 + t + x + t:x", "1 + t | child", "ar1:occ").unwrap();
        assert!(ar.describe().ends_with(", resid = ar1(occ)"));
        assert_eq!(
            ar.describe(),
            "y ~ 1 + t + x + t:x + (1 + t | child), resid = ar1(occ)"
        );
    }

    #[test]
    fn random_slope_without_fixed_slope_rejected() {
        let err = ModelSpec::from_flags("y", "1", "1 + t | g", "iid").unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
    }

    #[test]
    fn spec_json_shape() {
        let spec =
            ModelSpec::from_flags("y", "1 + t + x + t:x", "1 + t | child", "ar1:occ").unwrap();
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "response": "y",
                "fixed": ["1", "t", "x", "t:x"],
                "random": {"cluster": "child", "terms": ["1", "t"]},
                "residual": {"kind": "ar1", "occasion": "occ"}
            })
        );
        let back: ModelSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn null_and_treatment_by_time_dimensions() {
        let ds = rct_like();
        let null = ModelSpec::from_flags("y", "1", "1 | child", "iid").unwrap();
        let dm = build_design(&ds, &null).unwrap();
        assert_eq!((dm.p(), dm.q()), (1, 1));
        for b in &dm.clusters {
            assert!(b.x.iter().all(|&v| v == 1.0));
            assert_eq!(b.x, b.z);
        }

        let full = ModelSpec::from_flags("y", "1 + t + x + t:x", "1 + t | child", "iid").unwrap();
        let dm = build_design(&ds, &full).unwrap();
        assert_eq!((dm.p(), dm.q()), (4, 2));
        assert_eq!(dm.fixed_labels, ["1", "t", "x", "t:x"]);
        let b = &dm.clusters[1];
        assert_eq!(b.x.column(3), b.x.column(1).component_mul(&b.x.column(2)));
        assert_eq!(b.z.column(1), b.x.column(1));
    }

    #[test]
    fn collinear_term_is_named() {
        let ds = rct_like().interaction("t", "x").unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            fixed: vec![
                Term::Intercept,
                Term::column("t"),
                Term::column("x"),
                Term::product("t", "x"),
                Term::column("t:x"),
            ],
            random: RandomPart {
                cluster: "child".into(),
                terms: vec![Term::Intercept],
            },
            residual: Residual::Iid,
        };
        match build_design(&ds, &spec) {
            Err(Error::Collinearity { term }) => assert_eq!(term, "t:x"),
            other => panic!("expected collinearity, got {other:?}"),
        }
    }

    #[test]
    fn missing_rows_dropped_at_build_time() {
        let mut y: Vec<f64> = (0..6).map(f64::from).collect();
        y[2] = f64::NAN;
        let x = vec![0.1, 0.2, 0.3, f64::NAN, 0.5, 0.6];
        let ds = Dataset::from_columns(
            "g",
            ["a", "a", "a", "b", "b", "c"]
                .iter()
                .map(|s| Some(s.to_string()))
                .collect(),
            vec![
                ("y".into(), Column::Numeric(y)),
                ("x".into(), Column::Numeric(x)),
            ],
            None,
        )
        .unwrap();
        let null = ModelSpec::from_flags("y", "1", "1 | g", "iid").unwrap();
        let dm = build_design(&ds, &null).unwrap();
        assert_eq!((dm.n_obs, dm.n_dropped), (5, 1));
        let with_x = ModelSpec::from_flags("y", "1 + x", "1 | g", "iid").unwrap();
        let dm = build_design(&ds, &with_x).unwrap();
        assert_eq!((dm.n_obs, dm.n_dropped), (4, 2));
    }

    #[test]
    fn ar1_requires_occasion_column() {
        let ds = rct_like();
        let spec = ModelSpec::from_flags("y", "1 + t", "1 + t | child", "ar1:occ").unwrap();
        assert!(matches!(build_design(&ds, &spec), Err(Error::Spec(_))));
    }

    #[test]
    fn intercept_unit_vector_predicts_ones() {
        let ds = rct_like();
        let spec = ModelSpec::from_flags("y", "1 + t + x", "1 | child", "iid").unwrap();
        let dm = build_design(&ds, &spec).unwrap();
        let e0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        for b in &dm.clusters {
            assert!((&b.x * &e0).iter().all(|&v| v == 1.0));
        }
    }
}
