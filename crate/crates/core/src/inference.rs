//! Tests and derived summaries of fitted models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_ur;

use crate::design::Term;
use crate::error::{Error, Result};
use crate::likelihood::VarianceParams;
use crate::optimizer::FitResult;

/// Slack allowed when a nested deviance falls below the full one.
pub const DEVIANCE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Wald,
    Lrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<usize>,
    pub p_value: f64,
    /// Unadjusted chi-square tail; equals `p_value` unless `boundary_adjusted`.
    pub p_unadjusted: f64,
    pub boundary_adjusted: bool,
}

/// Two-sided standard-normal tail probability, as the one-df chi-square tail of `z²`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    chi_square_upper(z * z, 1)
}

/// Upper tail of a chi-square distribution.
pub fn chi_square_upper(statistic: f64, df: usize) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, statistic / 2.0).clamp(0.0, 1.0)
}

/// Two-sided standard-normal quantile for a confidence level (1.959964 at 0.95).
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} is not in (0, 1)"
        )));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Wald z-test of `estimate / se`.
pub fn wald(estimate: f64, se: Option<f64>) -> Result<TestResult> {
    let se = se
        .filter(|s| s.is_finite() && *s > 0.0)
        .ok_or_else(|| Error::TestUnavailable("standard error is unavailable".into()))?;
    let z = estimate / se;
    let p = normal_two_sided_p(z);
    Ok(TestResult {
        kind: TestKind::Wald,
        statistic: z,
        df: None,
        p_value: p,
        p_unadjusted: p,
        boundary_adjusted: false,
    })
}

/// Wald z-test for a fixed-effect label (`t:x`) or variance-component name (`sigma_u2`).
pub fn wald_z(fit: &FitResult, term: &str) -> Result<TestResult> {
    let est = fit
        .fixed_effect(term)
        .or_else(|| fit.component(term))
        .ok_or_else(|| Error::Config(format!("no estimate named '{term}'")))?;
    wald(est.estimate, est.se)
        .map_err(|_| Error::TestUnavailable(format!("standard error of '{term}' is unavailable")))
}

/// Likelihood-ratio test from two deviances. `boundary` halves the df = 1 p-value.
pub fn lrt_from_deviances(nested: f64, full: f64, df: usize, boundary: bool) -> Result<TestResult> {
    if boundary && df != 1 {
        return Err(Error::Config(
            "boundary halving is only defined for single-parameter tests (df = 1)".into(),
        ));
    }
    if df == 0 {
        return Err(Error::Config("likelihood-ratio test needs df >= 1".into()));
    }
    let raw = nested - full;
    if raw < -DEVIANCE_SLACK {
        return Err(Error::ConvergenceSuspect(raw));
    }
    let statistic = raw.max(0.0);
    let p = chi_square_upper(statistic, df);
    Ok(TestResult {
        kind: TestKind::Lrt,
        statistic,
        df: Some(df),
        p_value: if boundary { 0.5 * p } else { p },
        p_unadjusted: p,
        boundary_adjusted: boundary,
    })
}

/// Likelihood-ratio test of `nested` within `full`. `df` defaults to the
/// difference in parameter counts.
pub fn lrt(
    full: &FitResult,
    nested: &FitResult,
    df: Option<usize>,
    boundary: bool,
) -> Result<TestResult> {
    if full.counts.n != nested.counts.n || full.counts.clusters != nested.counts.clusters {
        return Err(Error::Alignment(format!(
            "fits use different data ({} vs {} observations, {} vs {} clusters)",
            full.counts.n, nested.counts.n, full.counts.clusters, nested.counts.clusters
        )));
    }
    if full.spec.response != nested.spec.response {
        return Err(Error::Alignment(format!(
            "fits model different responses ('{}' vs '{}')",
            full.spec.response, nested.spec.response
        )));
    }
    if df.is_none() && full.spec == nested.spec {
        // A model against itself: no restriction, so the statistic is zero.
        let raw = nested.deviance - full.deviance;
        if raw.abs() > DEVIANCE_SLACK {
            return Err(Error::ConvergenceSuspect(-raw.abs()));
        }
        return Ok(TestResult {
            kind: TestKind::Lrt,
            statistic: 0.0,
            df: Some(0),
            p_value: 1.0,
            p_unadjusted: 1.0,
            boundary_adjusted: false,
        });
    }
    let df = match df {
        Some(d) => d,
        None => full
            .n_params()
            .checked_sub(nested.n_params())
            .filter(|d| *d > 0)
            .ok_or_else(|| {
                Error::Config(
                    "nested fit does not have fewer parameters; pass df explicitly".into(),
                )
            })?,
    };
    lrt_from_deviances(nested.deviance, full.deviance, df, boundary)
}

/// Between/within split of a random-intercept model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub between: f64,
    pub within: f64,
    pub total: f64,
    /// Intraclass correlation, equal to the variance partition coefficient.
    pub icc_vpc: f64,
}

impl VarianceDecomposition {
    pub fn new(sigma_u2: f64, sigma_e2: f64) -> Self {
        let total = sigma_u2 + sigma_e2;
        Self {
            between: sigma_u2,
            within: sigma_e2,
            total,
            icc_vpc: sigma_u2 / total,
        }
    }
}

fn random_intercept_only(fit: &FitResult) -> Result<()> {
    if fit.counts.q != 1 || fit.spec.random.terms[0] != Term::Intercept {
        return Err(Error::WrongModel(
            "the ICC is constant only in random-intercept models; use icc_at_times for random slopes".into(),
        ));
    }
    Ok(())
}

pub fn icc_random_intercept(fit: &FitResult) -> Result<VarianceDecomposition> {
    random_intercept_only(fit)?;
    Ok(VarianceDecomposition::new(
        fit.variance.psi[(0, 0)],
        fit.variance.sigma_e2,
    ))
}

/// Proportional reductions in variance relative to a baseline fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub overall: f64,
    pub between: f64,
    pub within: f64,
    /// Set when any value is negative (a variance rose after adding covariates).
    pub negative: bool,
}

impl RSquared {
    pub fn between_decompositions(
        baseline: VarianceDecomposition,
        fit: VarianceDecomposition,
    ) -> Self {
        let reduction = |b: f64, f: f64| if b > 0.0 { (b - f) / b } else { 0.0 };
        let overall = reduction(baseline.total, fit.total);
        let between = reduction(baseline.between, fit.between);
        let within = reduction(baseline.within, fit.within);
        Self {
            overall,
            between,
            within,
            negative: overall < 0.0 || between < 0.0 || within < 0.0,
        }
    }
}

pub fn r_squared(fit: &FitResult, baseline: &FitResult) -> Result<RSquared> {
    if fit.counts.n != baseline.counts.n
        || fit.counts.clusters != baseline.counts.clusters
        || fit.spec.response != baseline.spec.response
        || fit.spec.random.cluster != baseline.spec.random.cluster
    {
        return Err(Error::Alignment(
            "fit and baseline do not share response, clustering and rows".into(),
        ));
    }
    Ok(RSquared::between_decompositions(
        icc_random_intercept(baseline)?,
        icc_random_intercept(fit)?,
    ))
}

/// Covariance structure of a growth model with random intercept and one random slope on time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCovariance {
    pub intercept_var: f64,
    pub covariance: f64,
    pub slope_var: f64,
    pub sigma_e2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl GrowthCovariance {
    /// From a `Ψ` that is 1×1 (intercept only) or 2×2 (intercept and slope).
    pub fn from_params(vp: &VarianceParams) -> Result<Self> {
        let (i, c, s) = match vp.q() {
            1 => (vp.psi[(0, 0)], 0.0, 0.0),
            2 => (vp.psi[(0, 0)], vp.psi[(1, 0)], vp.psi[(1, 1)]),
            q => {
                return Err(Error::WrongModel(format!(
                    "growth covariance needs a random intercept and at most one slope (q = {q})"
                )))
            }
        };
        Ok(Self {
            intercept_var: i,
            covariance: c,
            slope_var: s,
            sigma_e2: vp.sigma_e2,
            rho: vp.rho,
        })
    }

    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        let terms = &fit.spec.random.terms;
        let shape_ok = terms.first() == Some(&Term::Intercept)
            && terms.len() <= 2
            && terms.get(1).is_none_or(|t| matches!(t, Term::Column(_)));
        if !shape_ok {
            return Err(Error::WrongModel(
                "random part must be an intercept optionally followed by one slope".into(),
            ));
        }
        Self::from_params(&fit.variance)
    }

    /// Between-cluster covariance of observations at times `t1` and `t2`.
    pub fn between_covariance(&self, t1: f64, t2: f64) -> f64 {
        self.intercept_var + self.covariance * (t1 + t2) + self.slope_var * t1 * t2
    }

    /// Marginal variance at time `t`, optionally without the level-1 variance.
    pub fn marginal_variance(&self, t: f64, include_residual: bool) -> f64 {
        let b = self.between_covariance(t, t);
        if include_residual {
            b + self.sigma_e2
        } else {
            b
        }
    }

    /// Correlation between two observations of one cluster at times `t1`, `t2`
    /// from the random effects alone (level-1 autocorrelation not included).
    pub fn icc_at_times(&self, t1: f64, t2: f64) -> f64 {
        self.between_covariance(t1, t2)
            / (self.marginal_variance(t1, true) * self.marginal_variance(t2, true)).sqrt()
    }

    /// Implied correlation matrix over `times`, taken as consecutive occasions;
    /// under AR(1) the residual correlation `ρ^{|a−b|}` is added off the diagonal.
    pub fn implied_correlation_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        DMatrix::from_fn(n, n, |a, b| {
            if a == b {
                return 1.0;
            }
            let mut cov = self.between_covariance(times[a], times[b]);
            if let Some(rho) = self.rho {
                cov += self.sigma_e2 * rho.powi(a.abs_diff(b) as i32);
            }
            cov / (self.marginal_variance(times[a], true) * self.marginal_variance(times[b], true))
                .sqrt()
        })
    }
}

pub fn marginal_variance(fit: &FitResult, t: f64, include_residual: bool) -> Result<f64> {
    Ok(GrowthCovariance::from_fit(fit)?.marginal_variance(t, include_residual))
}

pub fn icc_at_times(fit: &FitResult, t1: f64, t2: f64) -> Result<f64> {
    Ok(GrowthCovariance::from_fit(fit)?.icc_at_times(t1, t2))
}

pub fn implied_correlation_matrix(fit: &FitResult, times: &[f64]) -> Result<DMatrix<f64>> {
    Ok(GrowthCovariance::from_fit(fit)?.implied_correlation_matrix(times))
}

/// Which population range [`coverage_range`] describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coverage {
    /// Cluster intercepts: fixed intercept ± z·√var(intercept).
    Intercept,
    /// Cluster coefficients of a random slope term.
    Slope(String),
    /// Level-1 residuals: ± z·σ_e.
    Residual,
}

/// `center ± z·√variance`.
pub fn coverage_interval(center: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    let half = normal_quantile(level)? * variance.max(0.0).sqrt();
    Ok((center - half, center + half))
}

/// Range expected to cover `level` of clusters (or residuals).
pub fn coverage_range(fit: &FitResult, which: &Coverage, level: f64) -> Result<(f64, f64)> {
    let random_index = |label: &str| {
        fit.spec
            .random
            .terms
            .iter()
            .position(|t| t.to_string() == label)
            .ok_or_else(|| Error::Config(format!("'{label}' is not a random term of this model")))
    };
    match which {
        Coverage::Residual => coverage_interval(0.0, fit.variance.sigma_e2, level),
        Coverage::Intercept | Coverage::Slope(_) => {
            let label = match which {
                Coverage::Slope(l) => l.as_str(),
                _ => "1",
            };
            let k = random_index(label)?;
            let center = fit
                .fixed_effect(label)
                .ok_or_else(|| Error::Config(format!("no fixed effect '{label}'")))?
                .estimate;
            coverage_interval(center, fit.variance.psi[(k, k)], level)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normal_tails() {
        assert_eq!(normal_two_sided_p(0.0), 1.0);
        assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-12);
        assert!((normal_quantile(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn chi_square_tails() {
        // Reference values of erfc(z/√2).
        for (z, p) in [
            (1.0, 0.317_310_507_862_914_1),
            (3.0, 0.002_699_796_063_260_207),
        ] {
            assert!((chi_square_upper(z * z, 1) - p).abs() < 1e-14);
        }
        // df = 2 is exponential with mean 2.
        assert!((chi_square_upper(3.0, 2) - (-1.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn wald_of_zero_estimate() {
        let t = wald(0.0, Some(1.0)).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        assert!(matches!(wald(1.0, None), Err(Error::TestUnavailable(_))));
    }

    #[test]
    fn lrt_edge_cases() {
        let t = lrt_from_deviances(100.0, 100.0, 1, false).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let halved = lrt_from_deviances(104.0, 100.0, 1, true).unwrap();
        assert_eq!(halved.p_value, 0.5 * halved.p_unadjusted);
        assert!(matches!(
            lrt_from_deviances(99.0, 100.0, 1, false),
            Err(Error::ConvergenceSuspect(_))
        ));
        assert!(lrt_from_deviances(100.0 - 1e-8, 100.0, 1, false).is_ok());
        assert!(matches!(
            lrt_from_deviances(110.0, 100.0, 2, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_between_variance_gives_zero_icc() {
        assert_eq!(VarianceDecomposition::new(0.0, 1.0).icc_vpc, 0.0);
    }

    #[test]
    fn r_squared_against_itself_is_zero() {
        let d = VarianceDecomposition::new(0.3, 0.7);
        let r = RSquared::between_decompositions(d, d);
        assert_eq!(
            (r.overall, r.between, r.within, r.negative),
            (0.0, 0.0, 0.0, false)
        );
        let worse = RSquared::between_decompositions(d, VarianceDecomposition::new(0.4, 0.7));
        assert!(worse.negative && worse.between < 0.0);
    }

    #[test]
    fn growth_degenerates_to_random_intercept() {
        let g = GrowthCovariance {
            intercept_var: 2.0,
            covariance: 0.0,
            slope_var: 0.0,
            sigma_e2: 3.0,
            rho: None,
        };
        assert_eq!(g.marginal_variance(0.0, true), 5.0);
        assert_eq!(g.marginal_variance(0.7, false), 2.0);
        assert!((g.icc_at_times(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(
            g.implied_correlation_matrix(&[0.5]),
            DMatrix::from_element(1, 1, 1.0)
        );
    }

    proptest! {
        #[test]
        fn implied_matrix_is_a_correlation_matrix(
            a in 0.1f64..100.0, b in 0.0f64..50.0, c in -0.99f64..0.99, s in 0.1f64..50.0,
            rho in proptest::option::of(-0.9f64..0.9),
            times in proptest::collection::vec(-2.0f64..3.0, 1..8),
        ) {
            let g = GrowthCovariance { intercept_var: a, covariance: c * (a * b).sqrt(), slope_var: b, sigma_e2: s, rho };
            let m = g.implied_correlation_matrix(&times);
            prop_assert!((&m - m.transpose()).amax() < 1e-12);
            for i in 0..times.len() {
                prop_assert_eq!(m[(i, i)], 1.0);
            }
            prop_assert!(m.symmetric_eigenvalues().min() >= -1e-10);
            for t in &times {
                let v = g.icc_at_times(*t, *t);
                prop_assert!(v > -1.0 && v <= 1.0);
            }
        }

        #[test]
        fn p_values_fall_with_statistic(x in 0.0f64..30.0, dx in 0.01f64..5.0, df in 1usize..5) {
            prop_assert!(chi_square_upper(x + dx, df) <= chi_square_upper(x, df));
            prop_assert!(normal_two_sided_p(x + dx) <= normal_two_sided_p(x));
        }
    }
}
