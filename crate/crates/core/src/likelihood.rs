//! Marginal Gaussian log-likelihood of a two-level model.
//!
//! For cluster `j` the response has covariance `V_j = Z_j Ψ Z_jᵀ + σ_e² R_j`,
//! where `R_j` is the identity (IID) or `ρ^{|occ_a - occ_b|}` (AR1). The fixed
//! effects are profiled out by generalized least squares, so the objective is a
//! function of the variance parameters only. Every cluster is whitened through
//! the Cholesky factor of its own `V_j`; the stacked covariance is never formed.
//!
//! Per-cluster work runs on the rayon pool, but partial sums are always added
//! in cluster order, so the result does not depend on the number of threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{ClusterBlock, DesignMatrices};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Random-effect covariance, level-1 variance and optional AR(1) correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    #[serde(with = "matrix_rows")]
    pub psi: DMatrix<f64>,
    pub sigma_e2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl VarianceParams {
    pub fn new(psi: DMatrix<f64>, sigma_e2: f64, rho: Option<f64>) -> Result<Self> {
        let vp = Self { psi, sigma_e2, rho };
        vp.validate()?;
        Ok(vp)
    }

    /// Random-intercept parameters `σ_u²`, `σ_e²`.
    pub fn random_intercept(sigma_u2: f64, sigma_e2: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, sigma_u2), sigma_e2, None)
    }

    /// Intercept/slope parameters `σ_u0²`, `σ_u01`, `σ_u1²`, `σ_e²`.
    pub fn random_slope(psi00: f64, psi01: f64, psi11: f64, sigma_e2: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[psi00, psi01, psi01, psi11]),
            sigma_e2,
            None,
        )
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = Some(rho);
        self.validate()?;
        Ok(self)
    }

    pub fn q(&self) -> usize {
        self.psi.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.psi.nrows();
        if q == 0 || self.psi.ncols() != q {
            return Err(Error::Config(
                "random-effect covariance must be square and non-empty".into(),
            ));
        }
        if self.psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "random-effect covariance is not finite".into(),
            ));
        }
        let scale = self.psi.amax().max(1.0);
        if (&self.psi - self.psi.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Config(
                "random-effect covariance is not symmetric".into(),
            ));
        }
        let min_eig = self.psi.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * scale {
            return Err(Error::Config(format!(
                "random-effect covariance is not positive semi-definite (eigenvalue {min_eig:.3e})"
            )));
        }
        if !(self.sigma_e2.is_finite() && self.sigma_e2 > 0.0) {
            return Err(Error::Config("level-1 variance must be positive".into()));
        }
        if let Some(rho) = self.rho {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(Error::Config(
                    "AR(1) correlation must lie strictly inside (-1, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Same parameters for a response multiplied by `k`.
    pub fn scaled(&self, k: f64) -> VarianceParams {
        VarianceParams {
            psi: &self.psi * (k * k),
            sigma_e2: self.sigma_e2 * k * k,
            rho: self.rho,
        }
    }
}

/// Log-likelihood at given variance parameters with `β` profiled out.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodValue {
    pub loglik: f64,
    pub deviance: f64,
    pub beta_hat: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
}

/// `V_j = Z Ψ Zᵀ + σ_e² R`, with `R[a,b] = ρ^{|occ_a − occ_b|}` under AR(1).
pub fn cluster_covariance(
    vp: &VarianceParams,
    z: &DMatrix<f64>,
    occasions: &[i64],
) -> DMatrix<f64> {
    let n = z.nrows();
    let zp = z * &vp.psi;
    let mut v = &zp * z.transpose();
    match vp.rho {
        Some(rho) if rho != 0.0 => {
            assert_eq!(
                occasions.len(),
                n,
                "AR(1) covariance needs an occasion per row"
            );
            for a in 0..n {
                for b in 0..n {
                    let gap = (occasions[a] - occasions[b]).unsigned_abs();
                    v[(a, b)] += vp.sigma_e2 * ar1_power(rho, gap);
                }
            }
        }
        _ => {
            for a in 0..n {
                v[(a, a)] += vp.sigma_e2;
            }
        }
    }
    v
}

fn ar1_power(rho: f64, gap: u64) -> f64 {
    if gap == 0 {
        1.0
    } else {
        rho.powi(gap.min(i32::MAX as u64) as i32)
    }
}

/// A cluster whitened by the Cholesky factor `L_j` of `V_j`.
pub(crate) struct Whitened {
    /// `L⁻¹ X_j`
    pub wx: DMatrix<f64>,
    /// `L⁻¹ y_j`
    pub wy: DVector<f64>,
    pub logdet: f64,
}

pub(crate) fn whiten(vp: &VarianceParams, block: &ClusterBlock) -> Result<Whitened> {
    let v = cluster_covariance(vp, &block.z, &block.occasions);
    let chol = Cholesky::new(v).ok_or_else(|| Error::Conditioning {
        cluster: block.label.clone(),
    })?;
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for i in 0..block.len() {
        logdet += l[(i, i)].ln();
    }
    let wx = l
        .solve_lower_triangular(&block.x)
        .ok_or_else(|| Error::Conditioning {
            cluster: block.label.clone(),
        })?;
    let wy = l
        .solve_lower_triangular(&block.y)
        .ok_or_else(|| Error::Conditioning {
            cluster: block.label.clone(),
        })?;
    if !logdet.is_finite() {
        return Err(Error::Conditioning {
            cluster: block.label.clone(),
        });
    }
    Ok(Whitened {
        wx,
        wy,
        logdet: 2.0 * logdet,
    })
}

pub(crate) fn whiten_all(vp: &VarianceParams, dm: &DesignMatrices) -> Result<Vec<Whitened>> {
    dm.clusters.par_iter().map(|b| whiten(vp, b)).collect()
}

/// GLS normal equations `Σ X_jᵀ V_j⁻¹ X_j` and `Σ X_jᵀ V_j⁻¹ y_j`, summed in cluster order.
fn normal_equations(w: &[Whitened], p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = w
        .par_iter()
        .map(|c| (c.wx.tr_mul(&c.wx), c.wx.tr_mul(&c.wy)))
        .collect();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (aj, bj) in &parts {
        a += aj;
        b += bj;
    }
    (a, b)
}

fn solve_gls(a: DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = Cholesky::new(a).ok_or_else(|| Error::Collinearity {
        term: "(normal equations singular)".into(),
    })?;
    let beta = chol.solve(b);
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((beta, cov))
}

/// `β̂ = (Σ X_jᵀV_j⁻¹X_j)⁻¹ Σ X_jᵀV_j⁻¹y_j` and its covariance `(Σ X_jᵀV_j⁻¹X_j)⁻¹`.
pub fn profile_beta(
    vp: &VarianceParams,
    dm: &DesignMatrices,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    vp.validate()?;
    let w = whiten_all(vp, dm)?;
    let (a, b) = normal_equations(&w, dm.p());
    solve_gls(a, &b)
}

/// Sum of `(y_j − X_j β)ᵀ V_j⁻¹ (y_j − X_j β)` and of `log|V_j|`, in cluster order.
fn quadratic_and_logdet(w: &[Whitened], beta: &DVector<f64>) -> (f64, f64) {
    let parts: Vec<(f64, f64)> = w
        .par_iter()
        .map(|c| ((&c.wy - &c.wx * beta).norm_squared(), c.logdet))
        .collect();
    (
        compensated_sum(parts.iter().map(|p| p.0)),
        compensated_sum(parts.iter().map(|p| p.1)),
    )
}

/// Neumaier-compensated sum; keeps the likelihood smooth enough for
/// finite-difference gradients when there are thousands of clusters.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}

/// Profiled log-likelihood and the GLS fixed effects at `vp`.
pub fn log_likelihood(vp: &VarianceParams, dm: &DesignMatrices) -> Result<LikelihoodValue> {
    vp.validate()?;
    if vp.q() != dm.q() {
        return Err(Error::Config(format!(
            "variance parameters have q = {}, design has q = {}",
            vp.q(),
            dm.q()
        )));
    }
    if dm.ar1 != vp.rho.is_some() {
        return Err(Error::Config(
            "AR(1) parameter does not match the residual structure".into(),
        ));
    }
    let w = whiten_all(vp, dm)?;
    let (a, b) = normal_equations(&w, dm.p());
    let (beta_hat, beta_cov) = solve_gls(a, &b)?;
    let (quad, logdet) = quadratic_and_logdet(&w, &beta_hat);
    let loglik = -0.5 * (dm.n_obs as f64 * LN_2PI + logdet + quad);
    Ok(LikelihoodValue {
        loglik,
        deviance: -2.0 * loglik,
        beta_hat,
        beta_cov,
    })
}

/// Log-likelihood at given `β` and variance parameters (no profiling).
pub fn full_log_likelihood(
    vp: &VarianceParams,
    beta: &DVector<f64>,
    dm: &DesignMatrices,
) -> Result<f64> {
    let w = whiten_all(vp, dm)?;
    let (quad, logdet) = quadratic_and_logdet(&w, beta);
    Ok(-0.5 * (dm.n_obs as f64 * LN_2PI + logdet + quad))
}

/// Serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("matrix rows differ in length"));
        }
        Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Column, Dataset};
    use crate::design::{build_design, ModelSpec};
    use std::f64::consts::PI;

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn compound_symmetry() {
        let vp = VarianceParams::random_intercept(0.3, 0.7).unwrap();
        let z = DMatrix::from_element(2, 1, 1.0);
        let v = cluster_covariance(&vp, &z, &[]);
        assert_eq!(v, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]));
    }

    #[test]
    fn ar1_zero_matches_iid_and_powers() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.2, 1.0, 0.4]);
        let base = VarianceParams::random_slope(2.0, 0.1, 0.5, 1.0).unwrap();
        let iid = cluster_covariance(&base, &z, &[1, 2, 3]);
        let ar0 = cluster_covariance(&base.clone().with_rho(0.0).unwrap(), &z, &[1, 2, 3]);
        assert_eq!(iid, ar0);

        let resid_only = VarianceParams::new(DMatrix::zeros(1, 1), 1.0, Some(0.17)).unwrap();
        let v = cluster_covariance(&resid_only, &DMatrix::from_element(3, 1, 1.0), &[1, 2, 3]);
        assert!((v[(0, 1)] - 0.17).abs() < 1e-15);
        assert!((v[(0, 2)] - 0.0289).abs() < 1e-15);
        assert!((v[(1, 2)] - 0.17).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(VarianceParams::random_intercept(0.1, 0.0).is_err());
        assert!(VarianceParams::random_slope(1.0, 2.0, 1.0, 1.0).is_err());
        let vp = VarianceParams::random_intercept(0.1, 1.0).unwrap();
        assert!(vp.with_rho(1.0).is_err());
    }

    fn one_cluster(y: &[f64]) -> DesignMatrices {
        let ds = Dataset::from_columns(
            "g",
            vec![Some("a".to_string()); y.len()],
            vec![("y".into(), Column::Numeric(y.to_vec()))],
            None,
        )
        .unwrap();
        build_design(
            &ds,
            &ModelSpec::from_flags("y", "1", "1 | g", "iid").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let dm = one_cluster(&[0.0]);
        // Ψ = 0 leaves V = σ_e² = 1.
        let vp = VarianceParams::random_intercept(0.0, 1.0).unwrap();
        let lv = log_likelihood(&vp, &dm).unwrap();
        assert!((lv.loglik + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert_eq!(lv.deviance, -2.0 * lv.loglik);
    }

    #[test]
    fn single_cluster_beta_is_sample_mean() {
        let y = [1.0, 4.0, 2.5, -0.5];
        let dm = one_cluster(&y);
        let vp = VarianceParams::random_intercept(0.0, 2.0).unwrap();
        let (beta, cov) = profile_beta(&vp, &dm).unwrap();
        assert!((beta[0] - 1.75).abs() < 1e-14);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mismatched_q_is_config_error() {
        let dm = one_cluster(&[1.0, 2.0]);
        let vp = VarianceParams::random_slope(1.0, 0.0, 1.0, 1.0).unwrap();
        assert!(matches!(log_likelihood(&vp, &dm), Err(Error::Config(_))));
    }

    #[test]
    fn serde_rows() {
        let vp = VarianceParams::random_slope(64.98, 2.07, 31.8, 22.0).unwrap();
        let json = serde_json::to_string(&vp).unwrap();
        assert_eq!(
            json,
            r#"{"psi":[[64.98,2.07],[2.07,31.8]],"sigma_e2":22.0}"#
        );
        let back: VarianceParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vp);
    }
}
