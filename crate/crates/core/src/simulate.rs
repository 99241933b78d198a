//! Synthetic clustered and longitudinal data.
//!
//! Randomness comes from ChaCha8 seeded by `seed`. Cluster `j` (0-based) draws
//! from stream `j + 1` of that seed, and the treatment permutation from stream
//! 0, so each cluster's draws do not depend on how many clusters come before
//! it or on the order in which clusters are generated.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Column, Dataset};
use crate::error::{Error, Result};
use crate::likelihood::VarianceParams;

/// Intercept of the default dropout hazard, chosen so that about 71% of
/// children complete all six occasions under [`SimulationParams::tutoring_trial`].
pub const DEFAULT_DROPOUT_INTERCEPT: f64 = -2.55;
pub const DEFAULT_DROPOUT_SLOPE: f64 = -0.5;

fn cluster_rng(seed: u64, cluster: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cluster as u64 + 1);
    rng
}

/// Per-occasion probability that a cluster leaves the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DropoutSpec {
    #[default]
    None,
    Constant {
        p: f64,
    },
    /// `logit P(drop at k) = intercept + slope·(y_{k−lag} − center)/scale`.
    Logistic {
        intercept: f64,
        slope: f64,
        center: f64,
        scale: f64,
        lag: usize,
    },
}

impl DropoutSpec {
    /// Lower previous scores raise the hazard.
    pub fn default_mar() -> Self {
        DropoutSpec::Logistic {
            intercept: DEFAULT_DROPOUT_INTERCEPT,
            slope: DEFAULT_DROPOUT_SLOPE,
            center: 54.0,
            scale: 10.0,
            lag: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DropoutSpec::None => Ok(()),
            DropoutSpec::Constant { p } if (0.0..=1.0).contains(&p) => Ok(()),
            DropoutSpec::Constant { p } => Err(Error::Spec(format!(
                "dropout probability {p} is not in [0, 1]"
            ))),
            DropoutSpec::Logistic { lag: 0, .. } => Err(Error::Spec(
                "dropout hazard may depend only on earlier occasions (lag >= 1)".into(),
            )),
            DropoutSpec::Logistic { scale, .. } if !(scale.is_finite() && scale != 0.0) => Err(
                Error::Spec("dropout scale must be finite and non-zero".into()),
            ),
            DropoutSpec::Logistic { .. } => Ok(()),
        }
    }

    /// Hazard at position `k ≥ 1` within a cluster given the scores seen so far.
    fn hazard(&self, k: usize, history: &[f64]) -> f64 {
        match *self {
            DropoutSpec::None => 0.0,
            DropoutSpec::Constant { p } => p,
            DropoutSpec::Logistic {
                intercept,
                slope,
                center,
                scale,
                lag,
            } => {
                let prev = history[k.saturating_sub(lag)];
                let eta = intercept + slope * (prev - center) / scale;
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }
}

/// Generator of a treatment-by-time growth model with a random intercept and slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalParams {
    /// Intercept, time, treatment, treatment × time.
    pub beta: [f64; 4],
    #[serde(with = "crate::likelihood::matrix_rows")]
    pub psi: DMatrix<f64>,
    pub sigma_e2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub clusters: usize,
    /// Time value of each occasion; strictly increasing.
    pub times: Vec<f64>,
    pub treatment_fraction: f64,
    #[serde(default)]
    pub dropout: DropoutSpec,
    pub seed: u64,
}

/// How a covariate of a cross-sectional design is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateLevel {
    /// One value per cluster.
    Cluster,
    /// One value per observation.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub level: CovariateLevel,
    #[serde(flatten)]
    pub dist: CovariateDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClusterSizes {
    Fixed { n: usize },
    List { sizes: Vec<usize> },
    Uniform { min: usize, max: usize },
}

/// Generator of a cross-sectional random-intercept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredParams {
    /// Intercept followed by one coefficient per covariate.
    pub beta: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub clusters: usize,
    pub sizes: ClusterSizes,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "lowercase")]
pub enum SimulationParams {
    Longitudinal(LongitudinalParams),
    Clustered(ClusteredParams),
}

impl SimulationParams {
    /// A 180-child, six-occasion tutoring trial with half the children treated
    /// and default MAR dropout.
    pub fn tutoring_trial(seed: u64) -> Self {
        SimulationParams::Longitudinal(LongitudinalParams::tutoring_trial(seed))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SimulationParams::Longitudinal(p) => p.validate(),
            SimulationParams::Clustered(p) => p.validate(),
        }
    }
}

impl LongitudinalParams {
    pub fn tutoring_trial(seed: u64) -> Self {
        Self {
            beta: [54.06, 5.83, 0.80, 5.05],
            psi: DMatrix::from_row_slice(2, 2, &[64.93, 0.42, 0.42, 25.95]),
            sigma_e2: 21.97,
            rho: None,
            clusters: 180,
            times: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            treatment_fraction: 0.5,
            dropout: DropoutSpec::default_mar(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.shape() != (2, 2) {
            return Err(Error::Spec("psi must be 2×2 (intercept and slope)".into()));
        }
        let vp = VarianceParams {
            psi: self.psi.clone(),
            sigma_e2: self.sigma_e2,
            rho: self.rho,
        };
        vp.validate()?;
        if self.clusters == 0 {
            return Err(Error::Spec("at least one cluster is required".into()));
        }
        if self.times.is_empty() || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Spec(
                "time grid must be non-empty and strictly increasing".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.treatment_fraction) {
            return Err(Error::Spec("treatment fraction must lie in [0, 1]".into()));
        }
        self.dropout.validate()
    }
}

impl ClusteredParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.covariates.len() + 1 {
            return Err(Error::Spec(format!(
                "beta has {} entries; expected intercept plus {} covariates",
                self.beta.len(),
                self.covariates.len()
            )));
        }
        VarianceParams::random_intercept(self.sigma_u2, self.sigma_e2)?;
        if self.clusters == 0 {
            return Err(Error::Spec("at least one cluster is required".into()));
        }
        match &self.sizes {
            ClusterSizes::Fixed { n: 0 } => {
                Err(Error::Spec("cluster size must be positive".into()))
            }
            ClusterSizes::List { sizes } if sizes.len() != self.clusters || sizes.contains(&0) => {
                Err(Error::Spec(
                    "size list must give one positive size per cluster".into(),
                ))
            }
            ClusterSizes::Uniform { min, max } if *min == 0 || min > max => {
                Err(Error::Spec("uniform sizes need 1 <= min <= max".into()))
            }
            _ => Ok(()),
        }?;
        for c in &self.covariates {
            match c.dist {
                CovariateDist::Normal { sd, .. } if !(sd >= 0.0 && sd.is_finite()) => {
                    return Err(Error::Spec(format!(
                        "covariate '{}' needs a finite sd >= 0",
                        c.name
                    )))
                }
                CovariateDist::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(Error::Spec(format!(
                        "covariate '{}' needs p in [0, 1]",
                        c.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// A square root `F` with `F Fᵀ = Ψ` for PSD `Ψ`.
fn psd_factor(psi: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = psi.clone().cholesky() {
        return chol.l();
    }
    let eig = psi.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * root
}

/// Draws one random-effect vector per cluster.
pub fn draw_random_effects(psi: &DMatrix<f64>, clusters: usize, seed: u64) -> Vec<DVector<f64>> {
    let f = psd_factor(psi);
    (0..clusters)
        .map(|j| {
            let mut rng = cluster_rng(seed, j);
            let z = DVector::from_fn(psi.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            &f * z
        })
        .collect()
}

/// Stationary AR(1) series with marginal variance `sigma2`.
fn ar1_series(rng: &mut impl Rng, n: usize, sigma2: f64, rho: f64) -> Vec<f64> {
    let sd = sigma2.sqrt();
    let innov = sd * (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    for k in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        prev = if k == 0 {
            sd * z
        } else {
            rho * prev + innov * z
        };
        out.push(prev);
    }
    out
}

fn treatment_indicators(clusters: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let treated = ((clusters as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut ids: Vec<usize> = (0..clusters).collect();
    ids.shuffle(&mut rng);
    let mut flags = vec![false; clusters];
    for &j in &ids[..treated.min(clusters)] {
        flags[j] = true;
    }
    flags
}

/// Balanced panel with columns `child`, `occ` (1-based), `t`, `x` (treatment) and `y`, before dropout.
pub fn simulate_longitudinal_complete(p: &LongitudinalParams) -> Result<Dataset> {
    p.validate()?;
    let k = p.times.len();
    let treat = treatment_indicators(p.clusters, p.treatment_fraction, p.seed);
    let f = psd_factor(&p.psi);
    let n = p.clusters * k;
    let (mut child, mut occ, mut t, mut x, mut y) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let [b0, b1, b2, b3] = p.beta;
    for (j, &treated) in treat.iter().enumerate() {
        let mut rng = cluster_rng(p.seed, j);
        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &f * z;
        let e = ar1_series(&mut rng, k, p.sigma_e2, p.rho.unwrap_or(0.0));
        let xj = if treated { 1.0 } else { 0.0 };
        for (i, &ti) in p.times.iter().enumerate() {
            child.push(Some((j + 1).to_string()));
            occ.push((i + 1) as f64);
            t.push(ti);
            x.push(xj);
            y.push(b0 + b1 * ti + b2 * xj + b3 * ti * xj + u[0] + u[1] * ti + e[i]);
        }
    }
    Dataset::from_columns(
        "child",
        child,
        vec![
            ("occ".into(), Column::Numeric(occ)),
            ("t".into(), Column::Numeric(t)),
            ("x".into(), Column::Numeric(x)),
            ("y".into(), Column::Numeric(y)),
        ],
        Some("occ".into()),
    )
}

/// Balanced panel followed by the configured dropout on `y`.
pub fn simulate_longitudinal(p: &LongitudinalParams) -> Result<Dataset> {
    let full = simulate_longitudinal_complete(p)?;
    apply_dropout(&full, "y", &p.dropout, p.seed)
}

/// Monotone dropout: walking each cluster's occasions in order, the cluster
/// leaves at position `k ≥ 1` with the hazard evaluated on scores already
/// observed; that row and all later rows are removed.
pub fn apply_dropout(
    ds: &Dataset,
    response: &str,
    hazard: &DropoutSpec,
    seed: u64,
) -> Result<Dataset> {
    hazard.validate()?;
    if ds.occasion_column().is_none() {
        return Err(Error::Spec(
            "dropout needs a dataset with an occasion column".into(),
        ));
    }
    if matches!(hazard, DropoutSpec::None) {
        return Ok(ds.clone());
    }
    let y = ds.numeric(response)?;
    let index = ds.group_index()?;
    let mut keep = vec![true; ds.n_rows()];
    for (j, range) in index.row_ranges.iter().enumerate() {
        let mut rng = cluster_rng(seed ^ 0x5eed_d20f, j);
        let history = &y[range.clone()];
        for k in 1..history.len() {
            let h = hazard.hazard(k, history);
            if rng.random::<f64>() < h {
                keep[range.start + k..range.end].fill(false);
                break;
            }
        }
    }
    ds.filter_rows(|i| keep[i])
}

/// How many clusters were observed at every occasion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    pub clusters: usize,
    pub rows: usize,
    pub complete: usize,
    pub fraction_complete: f64,
}

pub fn completeness(ds: &Dataset, occasions: usize) -> Result<Completeness> {
    let index = ds.group_index()?;
    let complete = index
        .cluster_sizes
        .iter()
        .filter(|&&n| n >= occasions)
        .count();
    Ok(Completeness {
        clusters: index.n_clusters(),
        rows: index.n_rows(),
        complete,
        fraction_complete: complete as f64 / index.n_clusters() as f64,
    })
}

fn draw_covariate(rng: &mut impl Rng, dist: &CovariateDist) -> f64 {
    match *dist {
        CovariateDist::Normal { mean, sd } => Normal::new(mean, sd).map_or(mean, |d| d.sample(rng)),
        CovariateDist::Bernoulli { p } => {
            let b = Bernoulli::new(p).expect("validated probability");
            if b.sample(rng) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Cross-sectional data with columns `cluster`, one per covariate, and `y`.
pub fn simulate_clustered(p: &ClusteredParams) -> Result<Dataset> {
    p.validate()?;
    let mut cluster = Vec::new();
    let mut covs: Vec<Vec<f64>> = vec![Vec::new(); p.covariates.len()];
    let mut y = Vec::new();
    let su = p.sigma_u2.sqrt();
    let se = p.sigma_e2.sqrt();
    for j in 0..p.clusters {
        let mut rng = cluster_rng(p.seed, j);
        let n = match &p.sizes {
            ClusterSizes::Fixed { n } => *n,
            ClusterSizes::List { sizes } => sizes[j],
            ClusterSizes::Uniform { min, max } => rng.random_range(*min..=*max),
        };
        let u = su * rng.sample::<f64, _>(StandardNormal);
        let cluster_values: Vec<f64> = p
            .covariates
            .iter()
            .map(|c| match c.level {
                CovariateLevel::Cluster => draw_covariate(&mut rng, &c.dist),
                CovariateLevel::Individual => f64::NAN,
            })
            .collect();
        for _ in 0..n {
            let mut mean = p.beta[0] + u;
            for (k, c) in p.covariates.iter().enumerate() {
                let v = match c.level {
                    CovariateLevel::Cluster => cluster_values[k],
                    CovariateLevel::Individual => draw_covariate(&mut rng, &c.dist),
                };
                covs[k].push(v);
                mean += p.beta[k + 1] * v;
            }
            let e: f64 = rng.sample(StandardNormal);
            y.push(mean + se * e);
            cluster.push(Some((j + 1).to_string()));
        }
    }
    let mut columns: Vec<(String, Column)> = p
        .covariates
        .iter()
        .zip(covs)
        .map(|(c, v)| (c.name.clone(), Column::Numeric(v)))
        .collect();
    columns.push(("y".into(), Column::Numeric(y)));
    Dataset::from_columns("cluster", cluster, columns, None)
}

/// Generates the dataset described by `params`.
pub fn simulate(params: &SimulationParams) -> Result<Dataset> {
    match params {
        SimulationParams::Longitudinal(p) => simulate_longitudinal(p),
        SimulationParams::Clustered(p) => simulate_clustered(p),
    }
}
