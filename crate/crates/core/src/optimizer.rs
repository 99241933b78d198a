//! Maximum-likelihood fitting.
//!
//! The variance parameters are searched on an unconstrained vector `θ`:
//! the lower-triangular Cholesky factor `L` of `Ψ = L Lᵀ` (row-major, diagonal
//! stored as `ln L_ii`), then `ln σ_e`, then `atanh ρ` for AR(1) models. Any
//! `θ` therefore maps to a valid [`VarianceParams`].
//!
//! The profiled log-likelihood is maximized by BFGS with central-difference
//! gradients. The search runs on the response divided by its sample standard
//! deviation, so tolerances, the boundary rule and the reported estimates do
//! not depend on the response's units.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::design::{build_design, DesignMatrices, ModelSpec, Term};
use crate::error::{Error, Result, TraceEntry};
use crate::likelihood::{full_log_likelihood, log_likelihood, VarianceParams};

/// `θ` coordinates of a log-diagonal below this are reported as a zero variance.
pub const BOUNDARY_LOG_DIAGONAL: f64 = -12.0;

/// Log-diagonals below this are tested for a boundary optimum after convergence.
const BOUNDARY_PROBE: f64 = -5.0;

/// Shape of a [`ThetaVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub q: usize,
    pub ar1: bool,
}

impl ThetaLayout {
    pub fn n_psi(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    pub fn len(&self) -> usize {
        self.n_psi() + 1 + usize::from(self.ar1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `θ` index of `L[a][a]`.
    pub fn diagonal_index(&self, a: usize) -> usize {
        a * (a + 1) / 2 + a
    }

    /// Row/column of `Ψ` for each of the first `n_psi` coordinates.
    pub fn psi_entries(&self) -> Vec<(usize, usize)> {
        (0..self.q)
            .flat_map(|a| (0..=a).map(move |b| (a, b)))
            .collect()
    }
}

/// Unconstrained variance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThetaVector(pub Vec<f64>);

/// Maps valid variance parameters with positive-definite `Ψ` to `θ`.
pub fn pack(vp: &VarianceParams) -> Result<ThetaVector> {
    vp.validate()?;
    let q = vp.q();
    let chol = Cholesky::new(vp.psi.clone()).ok_or_else(|| {
        Error::Boundary("random-effect covariance is singular and has no log-Cholesky image".into())
    })?;
    let l = chol.l();
    let layout = ThetaLayout {
        q,
        ar1: vp.rho.is_some(),
    };
    let mut theta = Vec::with_capacity(layout.len());
    for (a, b) in layout.psi_entries() {
        theta.push(if a == b { l[(a, a)].ln() } else { l[(a, b)] });
    }
    theta.push(0.5 * vp.sigma_e2.ln());
    if let Some(rho) = vp.rho {
        theta.push(rho.atanh());
    }
    Ok(ThetaVector(theta))
}

fn cholesky_factor(theta: &[f64], layout: ThetaLayout) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(layout.q, layout.q);
    for (k, (a, b)) in layout.psi_entries().into_iter().enumerate() {
        l[(a, b)] = if a == b { theta[k].exp() } else { theta[k] };
    }
    l
}

/// Inverse of [`pack`]; defined for every `θ` of the right length.
pub fn unpack(theta: &ThetaVector, layout: ThetaLayout) -> VarianceParams {
    assert_eq!(theta.0.len(), layout.len(), "theta has the wrong length");
    let l = cholesky_factor(&theta.0, layout);
    let psi = &l * l.transpose();
    let k = layout.n_psi();
    VarianceParams {
        psi: (&psi + psi.transpose()) * 0.5,
        sigma_e2: (2.0 * theta.0[k]).exp(),
        rho: layout.ar1.then(|| theta.0[k + 1].tanh()),
    }
}

/// Natural-scale parameters in `θ` order: `Ψ` lower triangle, `σ_e²`, `ρ`.
fn natural_vector(vp: &VarianceParams, layout: ThetaLayout) -> Vec<f64> {
    let mut out: Vec<f64> = layout
        .psi_entries()
        .into_iter()
        .map(|(a, b)| vp.psi[(a, b)])
        .collect();
    out.push(vp.sigma_e2);
    if let Some(rho) = vp.rho {
        out.push(rho);
    }
    out
}

/// `∂ natural / ∂ θ`.
fn natural_jacobian(theta: &[f64], layout: ThetaLayout) -> DMatrix<f64> {
    let m = layout.len();
    let entries = layout.psi_entries();
    let l = cholesky_factor(theta, layout);
    let mut jac = DMatrix::zeros(m, m);
    for (k, &(a, b)) in entries.iter().enumerate() {
        let mut dl = DMatrix::zeros(layout.q, layout.q);
        dl[(a, b)] = if a == b { l[(a, a)] } else { 1.0 };
        let dpsi = &dl * l.transpose() + &l * dl.transpose();
        for (r, &(i, j)) in entries.iter().enumerate() {
            jac[(r, k)] = dpsi[(i, j)];
        }
    }
    let k = layout.n_psi();
    jac[(k, k)] = 2.0 * (2.0 * theta[k]).exp();
    if layout.ar1 {
        let rho = theta[k + 1].tanh();
        jac[(k + 1, k + 1)] = 1.0 - rho * rho;
    }
    jac
}

/// Options for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the infinity norm of the `θ` gradient.
    pub grad_tol: f64,
    /// Relative central-difference step on `θ`.
    pub fd_step: f64,
    /// Seeds the perturbation used when the search restarts.
    pub seed: u64,
    /// Starting point on the internal (unit-SD response) scale.
    pub start: Option<ThetaVector>,
    pub compute_se: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            fd_step: 1e-5,
            seed: 0,
            start: None,
            compute_se: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub label: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

impl Estimate {
    pub fn z(&self) -> Option<f64> {
        self.se.filter(|s| *s > 0.0).map(|s| self.estimate / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Gradient norm reached `grad_tol`.
    Converged,
    /// Line search could not improve further; gradient norm within `10 × grad_tol`.
    ConvergedStalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub status: FitStatus,
    pub iterations: usize,
    pub grad_norm: f64,
    pub restarts: usize,
    /// Variance components estimated on the boundary and reported as zero.
    pub boundary: Vec<String>,
    pub se_available: bool,
    pub warnings: Vec<String>,
    /// Optimum on the internal scale; a valid `FitOptions::start`.
    pub theta: Vec<f64>,
    /// Standard deviation the response was divided by during the search.
    pub response_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n: usize,
    pub clusters: usize,
    pub p: usize,
    pub q: usize,
    pub dropped: usize,
}

/// Maximum-likelihood estimates with standard errors and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub model: String,
    pub fixed: Vec<Estimate>,
    pub variance_components: Vec<Estimate>,
    pub correlations: Vec<Estimate>,
    pub variance: VarianceParams,
    pub loglik: f64,
    pub deviance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icc: Option<f64>,
    pub counts: Counts,
    pub convergence: Convergence,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_iterator(self.fixed.len(), self.fixed.iter().map(|e| e.estimate))
    }

    pub fn fixed_effect(&self, label: &str) -> Option<&Estimate> {
        self.fixed.iter().find(|e| e.label == label)
    }

    /// Variance component or correlation by name (`sigma_u2`, `sigma_u01`, `rho_u01`, `sigma_e2`, `rho`, ...).
    pub fn component(&self, name: &str) -> Option<&Estimate> {
        self.variance_components
            .iter()
            .chain(&self.correlations)
            .find(|e| e.name == name)
    }

    /// Number of estimated parameters (fixed effects plus variance parameters).
    pub fn n_params(&self) -> usize {
        let layout = self.layout();
        self.counts.p + layout.len()
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout {
            q: self.counts.q,
            ar1: self.variance.rho.is_some(),
        }
    }

    /// Central-difference gradient of the profiled log-likelihood with respect
    /// to the internal `θ`, evaluated at the reported optimum.
    pub fn theta_gradient(&self, dm: &DesignMatrices, step: f64) -> Result<Vec<f64>> {
        let scaled = dm.with_affine_response(1.0 / self.convergence.response_scale, 0.0);
        let obj = Objective {
            dm: &scaled,
            layout: self.layout(),
        };
        obj.gradient(&self.convergence.theta, step)
            .map(|g| g.into_iter().map(|v| -v).collect())
            .ok_or_else(|| Error::Internal("log-likelihood not finite near the optimum".into()))
    }
}

/// Profiled negative log-likelihood as a function of `θ`.
struct Objective<'a> {
    dm: &'a DesignMatrices,
    layout: ThetaLayout,
}

impl Objective<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let vp = unpack(&ThetaVector(theta.to_vec()), self.layout);
        match log_likelihood(&vp, self.dm) {
            Ok(lv) if lv.loglik.is_finite() => -lv.loglik,
            _ => f64::INFINITY,
        }
    }

    fn gradient(&self, theta: &[f64], rel_step: f64) -> Option<Vec<f64>> {
        let mut x = theta.to_vec();
        let mut g = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let h = rel_step * x[i].abs().max(1.0);
            let orig = x[i];
            x[i] = orig + h;
            let fp = self.value(&x);
            x[i] = orig - h;
            let fm = self.value(&x);
            x[i] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return None;
            }
            g.push((fp - fm) / (2.0 * h));
        }
        Some(g)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Minimum {
    theta: Vec<f64>,
    grad_norm: f64,
    iterations: usize,
    restarts: usize,
    status: FitStatus,
}

/// BFGS on the inverse Hessian with backtracking line search.
fn minimize(obj: &Objective<'_>, start: Vec<f64>, opts: &FitOptions) -> Result<Minimum> {
    let m = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = start;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(Error::Data(
            "log-likelihood is not finite at the starting values".into(),
        ));
    }
    let grad_failure = || Error::Internal("log-likelihood not finite while differencing".into());
    let mut g = obj.gradient(&x, opts.fd_step).ok_or_else(grad_failure)?;
    let mut h = DMatrix::<f64>::identity(m, m);
    let mut fresh_h = true;
    let mut restarts = 0;
    let mut trace = Vec::new();

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        trace.push(TraceEntry {
            iteration: iter,
            objective: f,
            grad_norm: gnorm,
        });
        if gnorm <= opts.grad_tol {
            return Ok(Minimum {
                theta: x,
                grad_norm: gnorm,
                iterations: iter,
                restarts,
                status: FitStatus::Converged,
            });
        }

        let gv = DVector::from_column_slice(&g);
        let mut d = -(&h * &gv);
        let mut slope = gv.dot(&d);
        if slope >= 0.0 {
            h = DMatrix::identity(m, m);
            fresh_h = true;
            d = -gv.clone();
            slope = gv.dot(&d);
        }
        let dmax = d.amax();
        if dmax > 5.0 {
            d *= 5.0 / dmax;
            slope = gv.dot(&d);
        }

        let noise = 1e-10 * f.abs().max(1.0);
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut alpha = 1.0;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            let ft = obj.value(&trial);
            if ft - f <= 1e-4 * alpha * slope {
                if let Some(gt) = obj.gradient(&trial, opts.fd_step) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            } else if ft - f <= noise {
                // Within rounding of the objective: accept only if the gradient shrinks.
                if let Some(gt) = obj.gradient(&trial, opts.fd_step) {
                    if inf_norm(&gt) < gnorm {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if gnorm <= 10.0 * opts.grad_tol {
                return Ok(Minimum {
                    theta: x,
                    grad_norm: gnorm,
                    iterations: iter,
                    restarts,
                    status: FitStatus::ConvergedStalled,
                });
            }
            if restarts == 0 {
                restarts += 1;
                let perturbed: Vec<f64> = x
                    .iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v + 0.1 * e
                    })
                    .collect();
                let fp = obj.value(&perturbed);
                if let (true, Some(gp)) = (fp.is_finite(), obj.gradient(&perturbed, opts.fd_step)) {
                    x = perturbed;
                    f = fp;
                    g = gp;
                }
                h = DMatrix::identity(m, m);
                fresh_h = true;
                continue;
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                grad_norm: gnorm,
                trace,
            });
        };

        let s = DVector::from_iterator(m, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(m, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh_h {
                h = DMatrix::identity(m, m) * (sy / yv.dot(&yv));
                fresh_h = false;
            }
            let r = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (r * r * yhy + r)
                - (&hy * s.transpose() + &s * hy.transpose()) * r;
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm: inf_norm(&g),
        trace,
    })
}

fn response_scale(dm: &DesignMatrices) -> f64 {
    let y = dm.stacked_y();
    let n = y.len() as f64;
    if y.len() >= 2 {
        let mean = y.mean();
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if sd.is_finite() && sd > 0.0 {
            return sd;
        }
    }
    let amax = y.amax();
    if amax > 0.0 {
        amax
    } else {
        1.0
    }
}

/// Starting values: OLS fixed effects; half the residual variance to `σ_e²`,
/// the other half spread over the `q` random terms scaled by each covariate's
/// variance; zero covariances and `ρ = 0`.
pub fn default_start_design(dm: &DesignMatrices) -> Result<ThetaVector> {
    let x = dm.stacked_x();
    let y = dm.stacked_y();
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let rss = (&y - &x * beta).norm_squared();
    let dof = if dm.n_obs > dm.p() {
        dm.n_obs - dm.p()
    } else {
        dm.n_obs
    };
    let mut s2 = rss / dof as f64;
    if !(s2.is_finite() && s2 > 0.0) {
        s2 = 1e-8 * response_scale(dm).powi(2);
    }
    let q = dm.q();
    let mut psi = DMatrix::zeros(q, q);
    for k in 0..q {
        let col = x.column(dm.random_in_fixed[k]);
        let n = col.len() as f64;
        let var = if n >= 2.0 {
            let mean = col.mean();
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let var = if var > 1e-12 { var } else { 1.0 };
        psi[(k, k)] = 0.5 * s2 / q as f64 / var;
    }
    let vp = VarianceParams {
        psi,
        sigma_e2: 0.5 * s2,
        rho: dm.ar1.then_some(0.0),
    };
    pack(&vp)
}

/// [`default_start_design`] for `spec` over `ds`.
pub fn default_start(ds: &Dataset, spec: &ModelSpec) -> Result<ThetaVector> {
    default_start_design(&build_design(ds, spec)?)
}

/// Fits `spec` to `ds` by maximum likelihood.
pub fn fit(ds: &Dataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let dm = build_design(ds, spec)?;
    fit_design(&dm, spec, opts)
}

/// Fits a prebuilt design. `spec` must be the one `dm` was built from.
pub fn fit_design(dm: &DesignMatrices, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let layout = ThetaLayout {
        q: dm.q(),
        ar1: dm.ar1,
    };
    let scale = response_scale(dm);
    let scaled = dm.with_affine_response(1.0 / scale, 0.0);
    let obj = Objective {
        dm: &scaled,
        layout,
    };
    let start = match &opts.start {
        Some(t) if t.0.len() == layout.len() => t.0.clone(),
        Some(_) => return Err(Error::Config("starting theta has the wrong length".into())),
        None => default_start_design(&scaled)?.0,
    };
    let min = minimize(&obj, start, opts)?;

    // Boundary: drive near-zero log-diagonals to exactly zero when that does
    // not lower the likelihood.
    let mut reported = min.theta.clone();
    let mut boundary_idx = Vec::new();
    let f_opt = obj.value(&reported);
    for a in 0..layout.q {
        let k = layout.diagonal_index(a);
        if reported[k] < BOUNDARY_PROBE {
            let mut probe = reported.clone();
            probe[k] = f64::NEG_INFINITY;
            let f0 = obj.value(&probe);
            if reported[k] < BOUNDARY_LOG_DIAGONAL || f0 <= f_opt + 1e-9 * f_opt.abs().max(1.0) {
                reported = probe;
                boundary_idx.push(k);
            }
        }
    }
    let vp_scaled = unpack(&ThetaVector(reported.clone()), layout);
    let vp = vp_scaled.scaled(scale);
    let lv = log_likelihood(&vp, dm)?;

    let labels = &dm.random_labels;
    let mut warnings = Vec::new();
    let boundary: Vec<String> = boundary_idx
        .iter()
        .map(|&k| {
            let a = (0..layout.q)
                .find(|&a| layout.diagonal_index(a) == k)
                .unwrap();
            let name = format!("var({})", labels[a]);
            warnings.push(format!(
                "{name} estimated on the boundary of the parameter space (reported as 0)"
            ));
            name
        })
        .collect();

    let (beta_se, nat_cov) = if opts.compute_se {
        let free: Vec<usize> = (0..layout.len())
            .filter(|k| !boundary_idx.contains(k))
            .collect();
        let beta_scaled = &lv.beta_hat / scale;
        match standard_errors(&scaled, layout, &beta_scaled, &reported, &free) {
            Some((bcov, ncov)) => (
                Some(bcov.diagonal().map(|v| v.max(0.0).sqrt() * scale)),
                Some(ncov),
            ),
            None => {
                warnings.push("Hessian not positive definite; standard errors unavailable".into());
                (None, None)
            }
        }
    } else {
        (None, None)
    };

    let fixed: Vec<Estimate> = dm
        .fixed_labels
        .iter()
        .enumerate()
        .map(|(i, label)| Estimate {
            name: format!("beta_{i}"),
            label: label.clone(),
            estimate: lv.beta_hat[i],
            se: beta_se.as_ref().map(|s| s[i]),
        })
        .collect();

    let names = component_names(labels, layout);
    let natural = natural_vector(&vp, layout);
    let variance_components: Vec<Estimate> = names
        .iter()
        .enumerate()
        .map(|(k, (name, label))| {
            let unit = if k < layout.n_psi() + 1 {
                scale * scale
            } else {
                1.0
            };
            Estimate {
                name: name.clone(),
                label: label.clone(),
                estimate: natural[k],
                se: nat_cov.as_ref().and_then(|c| {
                    (!boundary_idx.contains(&k)).then(|| c[(k, k)].max(0.0).sqrt() * unit)
                }),
            }
        })
        .collect();

    let correlations = correlation_estimates(&vp_scaled, layout, labels, nat_cov.as_ref());

    let icc =
        (layout.q == 1 && spec.random.terms[0] == Term::Intercept && !layout.ar1).then(|| {
            let su = vp.psi[(0, 0)];
            su / (su + vp.sigma_e2)
        });

    Ok(FitResult {
        spec: spec.clone(),
        model: spec.describe(),
        fixed,
        variance_components,
        correlations,
        variance: vp,
        loglik: lv.loglik,
        deviance: lv.deviance,
        icc,
        counts: Counts {
            n: dm.n_obs,
            clusters: dm.n_clusters(),
            p: dm.p(),
            q: dm.q(),
            dropped: dm.n_dropped,
        },
        convergence: Convergence {
            status: min.status,
            iterations: min.iterations,
            grad_norm: min.grad_norm,
            restarts: min.restarts,
            boundary,
            se_available: beta_se.is_some(),
            warnings,
            theta: min.theta,
            response_scale: scale,
        },
    })
}

/// `(name, label)` of each natural-scale variance parameter, in `θ` order.
fn component_names(labels: &[String], layout: ThetaLayout) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = layout
        .psi_entries()
        .into_iter()
        .map(|(a, b)| {
            if layout.q == 1 {
                ("sigma_u2".to_owned(), format!("var({})", labels[0]))
            } else if a == b {
                (format!("sigma_u{a}_2"), format!("var({})", labels[a]))
            } else {
                (
                    format!("sigma_u{b}{a}"),
                    format!("cov({},{})", labels[b], labels[a]),
                )
            }
        })
        .collect();
    out.push(("sigma_e2".into(), "residual variance".into()));
    if layout.ar1 {
        out.push(("rho".into(), "residual autocorrelation".into()));
    }
    out
}

fn correlation_estimates(
    vp: &VarianceParams,
    layout: ThetaLayout,
    labels: &[String],
    nat_cov: Option<&DMatrix<f64>>,
) -> Vec<Estimate> {
    let entries = layout.psi_entries();
    let idx = |a: usize, b: usize| {
        entries
            .iter()
            .position(|&e| e == (a.max(b), a.min(b)))
            .unwrap()
    };
    let mut out = Vec::new();
    for a in 1..layout.q {
        for b in 0..a {
            let (vb, va, cov) = (vp.psi[(b, b)], vp.psi[(a, a)], vp.psi[(a, b)]);
            let denom = (va * vb).sqrt();
            let (estimate, se) = if denom > 0.0 {
                let r = (cov / denom).clamp(-1.0, 1.0);
                let grad = [1.0 / denom, -0.5 * r / vb, -0.5 * r / va];
                let ks = [idx(a, b), idx(b, b), idx(a, a)];
                let se = nat_cov.map(|c| {
                    let mut v = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            v += grad[i] * grad[j] * c[(ks[i], ks[j])];
                        }
                    }
                    v.max(0.0).sqrt()
                });
                (r, se)
            } else {
                (0.0, None)
            };
            out.push(Estimate {
                name: format!("rho_u{b}{a}"),
                label: format!("corr({},{})", labels[b], labels[a]),
                estimate,
                se,
            });
        }
    }
    out
}

/// Inverse negative Hessian of the full log-likelihood in `(β, θ_free)`;
/// returns the `β` block and the natural-scale variance covariance (on the
/// scaled problem) obtained by the delta method.
fn standard_errors(
    dm: &DesignMatrices,
    layout: ThetaLayout,
    beta: &DVector<f64>,
    theta: &[f64],
    free: &[usize],
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let p = beta.len();
    let dim = p + free.len();
    let mut point: Vec<f64> = beta.iter().copied().collect();
    point.extend(free.iter().map(|&k| theta[k]));

    let eval = |v: &[f64]| -> f64 {
        let b = DVector::from_column_slice(&v[..p]);
        let mut th = theta.to_vec();
        for (i, &k) in free.iter().enumerate() {
            th[k] = v[p + i];
        }
        let vp = unpack(&ThetaVector(th), layout);
        full_log_likelihood(&vp, &b, dm).unwrap_or(f64::NAN)
    };

    let steps: Vec<f64> = point.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let f0 = eval(&point);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut x = point.clone();
    for i in 0..dim {
        let hi = steps[i];
        x[i] = point[i] + hi;
        let fp = eval(&x);
        x[i] = point[i] - hi;
        let fm = eval(&x);
        x[i] = point[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| {
                x[i] = point[i] + si * hi;
                x[j] = point[j] + sj * hj;
                let v = eval(&x);
                x[i] = point[i];
                x[j] = point[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let info = -hess;
    let cov = Cholesky::new(info)?.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;

    let beta_cov = cov.view((0, 0), (p, p)).into_owned();
    let theta_cov_free = cov.view((p, p), (free.len(), free.len())).into_owned();
    let m = layout.len();
    let mut theta_cov = DMatrix::zeros(m, m);
    for (i, &ki) in free.iter().enumerate() {
        for (j, &kj) in free.iter().enumerate() {
            theta_cov[(ki, kj)] = theta_cov_free[(i, j)];
        }
    }
    let jac = natural_jacobian(theta, layout);
    let nat_cov = &jac * theta_cov * jac.transpose();
    Some((beta_cov, nat_cov))
}
