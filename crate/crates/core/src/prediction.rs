//! Empirical-Bayes prediction of cluster effects and residual extraction.

use std::io::Write;

use indexmap::IndexMap;
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrices, Term};
use crate::error::{Error, Result};
use crate::inference::normal_quantile;
use crate::likelihood::{cluster_covariance, VarianceParams};
use crate::optimizer::FitResult;

/// Predicted random effects of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffect {
    pub cluster: String,
    pub n: usize,
    pub u_hat: Vec<f64>,
    /// Square roots of the diagonal of the conditional covariance.
    pub cond_sd: Vec<f64>,
    pub interval: Vec<(f64, f64)>,
    /// Position (1-based) in ascending order of the first component.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbPrediction {
    pub terms: Vec<String>,
    pub level: f64,
    /// In design (cluster label) order.
    pub clusters: Vec<ClusterEffect>,
}

fn check_alignment(fit: &FitResult, dm: &DesignMatrices) -> Result<()> {
    if fit.counts.n != dm.n_obs
        || fit.counts.clusters != dm.n_clusters()
        || fit.counts.p != dm.p()
        || fit.counts.q != dm.q()
        || fit.variance.rho.is_some() != dm.ar1
    {
        return Err(Error::Alignment(
            "fit does not match the supplied design (rows, clusters or terms differ)".into(),
        ));
    }
    Ok(())
}

/// `û_j = Ψ Z_jᵀ V_j⁻¹ (y_j − X_j β)` with conditional covariance
/// `Ψ − Ψ Z_jᵀ V_j⁻¹ Z_j Ψ`; intervals are `û ± z·cond_sd`.
pub fn eb_predict_with(
    vp: &VarianceParams,
    beta: &DVector<f64>,
    dm: &DesignMatrices,
    level: f64,
) -> Result<EbPrediction> {
    let z_level = normal_quantile(level)?;
    let q = dm.q();
    let per_cluster: Vec<(Vec<f64>, Vec<f64>)> = dm
        .clusters
        .par_iter()
        .map(|b| {
            let v = cluster_covariance(vp, &b.z, &b.occasions);
            let chol = Cholesky::new(v).ok_or_else(|| Error::Conditioning {
                cluster: b.label.clone(),
            })?;
            let r = &b.y - &b.x * beta;
            let psi_zt = &vp.psi * b.z.transpose();
            let u = &psi_zt * chol.solve(&r);
            let cond = &vp.psi - &psi_zt * chol.solve(&b.z) * &vp.psi;
            let sd = (0..q).map(|k| cond[(k, k)].max(0.0).sqrt()).collect();
            Ok((u.iter().copied().collect(), sd))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..per_cluster.len()).collect();
    order.sort_by(|&a, &b| {
        per_cluster[a].0[0]
            .total_cmp(&per_cluster[b].0[0])
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }

    let clusters = dm
        .clusters
        .iter()
        .zip(per_cluster)
        .zip(ranks)
        .map(|((b, (u_hat, cond_sd)), rank)| ClusterEffect {
            cluster: b.label.clone(),
            n: b.len(),
            interval: u_hat
                .iter()
                .zip(&cond_sd)
                .map(|(u, s)| (u - z_level * s, u + z_level * s))
                .collect(),
            u_hat,
            cond_sd,
            rank,
        })
        .collect();
    Ok(EbPrediction {
        terms: dm.random_labels.clone(),
        level,
        clusters,
    })
}

/// Empirical-Bayes predictions with 95% intervals.
pub fn eb_predict(fit: &FitResult, dm: &DesignMatrices) -> Result<EbPrediction> {
    check_alignment(fit, dm)?;
    eb_predict_with(&fit.variance, &fit.beta(), dm, 0.95)
}

/// `σ_u² / (σ_u² + σ_e²/n)`.
pub fn shrinkage(sigma_u2: f64, sigma_e2: f64, n: usize) -> f64 {
    if sigma_u2 <= 0.0 {
        return 0.0;
    }
    sigma_u2 / (sigma_u2 + sigma_e2 / n as f64)
}

/// Shrinkage factor of one cluster in a random-intercept fit.
pub fn shrinkage_factor(fit: &FitResult, dm: &DesignMatrices, cluster: &str) -> Result<f64> {
    if fit.counts.q != 1 || fit.spec.random.terms[0] != Term::Intercept || dm.ar1 {
        return Err(Error::WrongModel(
            "a scalar shrinkage factor exists only for random-intercept models with independent residuals".into(),
        ));
    }
    let block = dm
        .clusters
        .iter()
        .find(|b| b.label == cluster)
        .ok_or_else(|| Error::Config(format!("unknown cluster '{cluster}'")))?;
    Ok(shrinkage(
        fit.variance.psi[(0, 0)],
        fit.variance.sigma_e2,
        block.len(),
    ))
}

/// One line of a caterpillar league table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaterpillarRow {
    pub rank: usize,
    pub cluster: String,
    pub u_hat: f64,
    pub cond_sd: f64,
    pub low: f64,
    pub high: f64,
    pub n: usize,
    /// The interval excludes zero.
    pub separable: bool,
}

/// Clusters ranked by the first random-effect component.
pub fn caterpillar(
    fit: &FitResult,
    dm: &DesignMatrices,
    level: f64,
) -> Result<Vec<CaterpillarRow>> {
    check_alignment(fit, dm)?;
    let eb = eb_predict_with(&fit.variance, &fit.beta(), dm, level)?;
    Ok(caterpillar_rows(&eb))
}

pub fn caterpillar_rows(eb: &EbPrediction) -> Vec<CaterpillarRow> {
    let mut rows: Vec<CaterpillarRow> = eb
        .clusters
        .iter()
        .map(|c| {
            let (low, high) = c.interval[0];
            CaterpillarRow {
                rank: c.rank,
                cluster: c.cluster.clone(),
                u_hat: c.u_hat[0],
                cond_sd: c.cond_sd[0],
                low,
                high,
                n: c.n,
                separable: low > 0.0 || high < 0.0,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    rows
}

pub fn write_caterpillar_csv<W: Write>(rows: &[CaterpillarRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    if rows.is_empty() {
        w.write_record([
            "rank",
            "cluster",
            "u_hat",
            "cond_sd",
            "low",
            "high",
            "n",
            "separable",
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Internal(format!("{other:?}")),
    }
}

/// Covariate values at which to draw fitted lines; all columns share one length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grid {
    pub columns: IndexMap<String, Vec<f64>>,
}

impl Grid {
    pub fn new(column: impl Into<String>, values: Vec<f64>) -> Self {
        let mut columns = IndexMap::new();
        columns.insert(column.into(), values);
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePoint {
    pub grid: Vec<f64>,
    /// `x(grid)ᵀ β̂`
    pub population: f64,
    /// `x(grid)ᵀ β̂ + z(grid)ᵀ û_j`
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLine {
    pub cluster: String,
    pub points: Vec<LinePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLines {
    pub grid_columns: Vec<String>,
    pub lines: Vec<ClusterLine>,
}

/// Fitted lines per cluster over `grid`. Columns absent from the grid must be
/// constant within each cluster and appear as a fixed term of their own; their
/// cluster value is used.
pub fn cluster_lines(fit: &FitResult, dm: &DesignMatrices, grid: &Grid) -> Result<ClusterLines> {
    check_alignment(fit, dm)?;
    let g = grid.len();
    if grid.columns.values().any(|v| v.len() != g) {
        return Err(Error::Config("grid columns differ in length".into()));
    }
    let spec = &fit.spec;
    let referenced: Vec<&String> = spec.fixed.iter().flat_map(|t| t.columns()).collect();
    if let Some(extra) = grid.columns.keys().find(|c| !referenced.contains(c)) {
        return Err(Error::Config(format!(
            "grid column '{extra}' is not used by the model"
        )));
    }
    let beta = fit.beta();
    let eb = eb_predict_with(&fit.variance, &beta, dm, 0.95)?;

    let mut lines = Vec::with_capacity(dm.n_clusters());
    for (block, effect) in dm.clusters.iter().zip(&eb.clusters) {
        let mut held: IndexMap<&str, f64> = IndexMap::new();
        for col in &referenced {
            if grid.columns.contains_key(col.as_str()) || held.contains_key(col.as_str()) {
                continue;
            }
            let idx = spec
                .fixed
                .iter()
                .position(|t| matches!(t, Term::Column(c) if c == *col))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "column '{col}' is neither in the grid nor a fixed term of its own"
                    ))
                })?;
            let values = block.x.column(idx);
            let first = values[0];
            if values.iter().any(|v| *v != first) {
                return Err(Error::Config(format!(
                    "column '{col}' varies within cluster '{}' and must be given in the grid",
                    block.label
                )));
            }
            held.insert(col.as_str(), first);
        }
        let points = (0..g)
            .map(|i| {
                let value = |c: &str| grid.columns.get(c).map_or_else(|| held[c], |v| v[i]);
                let x: Vec<f64> = spec.fixed.iter().map(|t| t.evaluate(value)).collect();
                let population: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let shift: f64 = dm
                    .random_in_fixed
                    .iter()
                    .zip(&effect.u_hat)
                    .map(|(&k, u)| x[k] * u)
                    .sum();
                LinePoint {
                    grid: grid.columns.values().map(|v| v[i]).collect(),
                    population,
                    predicted: population + shift,
                }
            })
            .collect();
        lines.push(ClusterLine {
            cluster: block.label.clone(),
            points,
        });
    }
    Ok(ClusterLines {
        grid_columns: grid.columns.keys().cloned().collect(),
        lines,
    })
}

/// Long CSV: `cluster`, one column per grid variable, `population`, `predicted`.
pub fn write_lines_csv<W: Write>(lines: &ClusterLines, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_owned()];
    header.extend(lines.grid_columns.iter().cloned());
    header.extend(["population".to_owned(), "predicted".to_owned()]);
    w.write_record(&header).map_err(csv_error)?;
    for line in &lines.lines {
        for p in &line.points {
            let mut rec = vec![line.cluster.clone()];
            rec.extend(p.grid.iter().map(f64::to_string));
            rec.push(p.population.to_string());
            rec.push(p.predicted.to_string());
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-observation residuals in design order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub cluster: Vec<usize>,
    pub occasion: Vec<Option<i64>>,
    /// `y − Xβ̂`
    pub raw: Vec<f64>,
    /// `Zû`
    pub level2: Vec<f64>,
    /// `y − Xβ̂ − Zû`
    pub level1: Vec<f64>,
}

pub fn residuals(fit: &FitResult, dm: &DesignMatrices) -> Result<ResidualSet> {
    check_alignment(fit, dm)?;
    let beta = fit.beta();
    let eb = eb_predict_with(&fit.variance, &beta, dm, 0.95)?;
    let mut out = ResidualSet {
        cluster: Vec::with_capacity(dm.n_obs),
        occasion: Vec::with_capacity(dm.n_obs),
        raw: Vec::with_capacity(dm.n_obs),
        level2: Vec::with_capacity(dm.n_obs),
        level1: Vec::with_capacity(dm.n_obs),
    };
    for (j, (b, e)) in dm.clusters.iter().zip(&eb.clusters).enumerate() {
        let raw = &b.y - &b.x * &beta;
        let l2 = &b.z * DVector::from_column_slice(&e.u_hat);
        for i in 0..b.len() {
            out.cluster.push(j);
            out.occasion.push(b.occasions.get(i).copied());
            out.raw.push(raw[i]);
            out.level2.push(l2[i]);
            out.level1.push(raw[i] - l2[i]);
        }
    }
    Ok(out)
}

/// Pairwise-complete correlations of raw residuals across occasions.
/// Entries with fewer than three contributing clusters are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCorrelation {
    pub occasions: Vec<i64>,
    pub matrix: Vec<Vec<Option<f64>>>,
    pub pairs: DMatrix<usize>,
}

pub fn empirical_residual_correlation(
    fit: &FitResult,
    dm: &DesignMatrices,
    occasions: &[i64],
) -> Result<ResidualCorrelation> {
    check_alignment(fit, dm)?;
    empirical_residual_correlation_at(&fit.beta(), dm, occasions)
}

/// [`empirical_residual_correlation`] for residuals `y − Xβ` at a given `β`.
pub fn empirical_residual_correlation_at(
    beta: &DVector<f64>,
    dm: &DesignMatrices,
    occasions: &[i64],
) -> Result<ResidualCorrelation> {
    if beta.len() != dm.p() {
        return Err(Error::Alignment(
            "beta length does not match the design".into(),
        ));
    }
    if dm.clusters.iter().any(|b| b.occasions.is_empty()) {
        return Err(Error::Spec(
            "residual correlations need an occasion column".into(),
        ));
    }
    let k = occasions.len();
    let by_cluster: Vec<Vec<Option<f64>>> = dm
        .clusters
        .iter()
        .map(|b| {
            let raw = &b.y - &b.x * beta;
            let mut row = vec![None; k];
            for (i, occ) in b.occasions.iter().enumerate() {
                if let Some(pos) = occasions.iter().position(|o| o == occ) {
                    row[pos] = Some(raw[i]);
                }
            }
            row
        })
        .collect();

    let mut matrix = vec![vec![None; k]; k];
    let mut pairs = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let (xs, ys): (Vec<f64>, Vec<f64>) = by_cluster
                .iter()
                .filter_map(|r| Some((r[a]?, r[b]?)))
                .unzip();
            pairs[(a, b)] = xs.len();
            pairs[(b, a)] = xs.len();
            let r = if xs.len() < 3 {
                None
            } else {
                pearson(&xs, &ys)
            };
            matrix[a][b] = r;
            matrix[b][a] = r;
        }
    }
    Ok(ResidualCorrelation {
        occasions: occasions.to_vec(),
        matrix,
        pairs,
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| (sxy / denom).clamp(-1.0, 1.0))
}
