#![allow(dead_code)]

use hierarch::{build_design, Column, Dataset, DesignMatrices, ModelSpec, VarianceParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Block-diagonal marginal covariance of the stacked response, assembled entry by entry.
pub fn dense_covariance(vp: &VarianceParams, dm: &DesignMatrices) -> DMatrix<f64> {
    let n = dm.n_obs;
    let q = dm.q();
    let mut v = DMatrix::zeros(n, n);
    let mut start = 0;
    for b in &dm.clusters {
        for a in 0..b.len() {
            for c in 0..b.len() {
                let mut s = 0.0;
                for k in 0..q {
                    for l in 0..q {
                        s += b.z[(a, k)] * vp.psi[(k, l)] * b.z[(c, l)];
                    }
                }
                let resid = match vp.rho {
                    Some(rho) => {
                        let gap = (b.occasions[a] - b.occasions[c]).abs();
                        vp.sigma_e2 * rho.powi(gap as i32)
                    }
                    None if a == c => vp.sigma_e2,
                    None => 0.0,
                };
                v[(start + a, start + c)] = s + resid;
            }
        }
        start += b.len();
    }
    v
}

/// Profiled log-likelihood from the stacked system with an explicit inverse.
pub fn dense_loglik(vp: &VarianceParams, dm: &DesignMatrices) -> (f64, DVector<f64>) {
    let v = dense_covariance(vp, dm);
    let x = dm.stacked_x();
    let y = dm.stacked_y();
    let vinv = v.clone().try_inverse().expect("invertible covariance");
    let xtv = x.transpose() * &vinv;
    let beta = (&xtv * &x).try_inverse().expect("invertible normal matrix") * (&xtv * &y);
    let r = &y - &x * &beta;
    let quad = (r.transpose() * &vinv * &r)[(0, 0)];
    let logdet = v.determinant().ln();
    let n = dm.n_obs as f64;
    (
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad),
        beta,
    )
}

/// A small random dataset: up to three clusters of up to four observations,
/// columns `g` (cluster), `occ`, `t`, `y`.
pub fn tiny_instance(seed: u64, q: usize, ar1: bool) -> (Dataset, ModelSpec, VarianceParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = rng.random_range(1..=3usize);
    let (mut g, mut occ, mut t, mut y) = (vec![], vec![], vec![], vec![]);
    for c in 0..j {
        let n = rng.random_range(2..=4usize);
        let mut occs: Vec<usize> = (1..=6).collect();
        while occs.len() > n {
            let drop = rng.random_range(0..occs.len());
            occs.remove(drop);
        }
        for o in occs {
            g.push(Some(format!("c{c}")));
            occ.push(o as f64);
            t.push((o as f64 - 1.0) / 5.0 + rng.random_range(-0.05..0.05));
            y.push(rng.random_range(-3.0..3.0));
        }
    }
    let ds = Dataset::from_columns(
        "g",
        g,
        vec![
            ("occ".into(), Column::Numeric(occ)),
            ("t".into(), Column::Numeric(t)),
            ("y".into(), Column::Numeric(y)),
        ],
        Some("occ".into()),
    )
    .unwrap();
    let random = if q == 1 { "1 | g" } else { "1 + t | g" };
    let resid = if ar1 { "ar1:occ" } else { "iid" };
    let spec = ModelSpec::from_flags("y", "1 + t", random, resid).unwrap();

    let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.5..1.5));
    let psi = &a * a.transpose() + DMatrix::identity(q, q) * 0.1;
    let sigma_e2 = rng.random_range(0.2..2.0);
    let rho = ar1.then(|| rng.random_range(-0.8..0.8));
    let vp = VarianceParams::new(psi, sigma_e2, rho).unwrap();
    (ds, spec, vp)
}

pub fn tiny_design(seed: u64, q: usize, ar1: bool) -> (DesignMatrices, VarianceParams) {
    let (ds, spec, vp) = tiny_instance(seed, q, ar1);
    (build_design(&ds, &spec).unwrap(), vp)
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Relative difference, guarded near zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
