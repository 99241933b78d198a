mod common;

use common::{dense_loglik, tiny_design, tiny_instance};
use hierarch::likelihood::{full_log_likelihood, profile_beta};
use hierarch::{build_design, log_likelihood, Column, Dataset, ModelSpec, VarianceParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_cluster_likelihood_matches_dense_oracle(seed in 0u64..1_000_000, q in 1usize..=2, ar1 in any::<bool>()) {
        let (dm, vp) = tiny_design(seed, q, ar1);
        let lv = log_likelihood(&vp, &dm).unwrap();
        let (oracle, beta) = dense_loglik(&vp, &dm);
        prop_assert!((lv.loglik - oracle).abs() <= 1e-8, "{} vs {}", lv.loglik, oracle);
        prop_assert!((&lv.beta_hat - &beta).amax() <= 1e-8);
        prop_assert_eq!(lv.deviance, -2.0 * lv.loglik);
    }

    #[test]
    fn full_likelihood_at_gls_beta_equals_profiled(seed in 0u64..1_000_000, ar1 in any::<bool>()) {
        let (dm, vp) = tiny_design(seed, 2, ar1);
        let lv = log_likelihood(&vp, &dm).unwrap();
        let full = full_log_likelihood(&vp, &lv.beta_hat, &dm).unwrap();
        prop_assert!((full - lv.loglik).abs() <= 1e-9);
    }

    #[test]
    fn cluster_permutation_invariance(seed in 0u64..1_000_000, ar1 in any::<bool>()) {
        let (mut dm, vp) = tiny_design(seed, 2, ar1);
        let before = log_likelihood(&vp, &dm).unwrap().loglik;
        dm.clusters.reverse();
        let after = log_likelihood(&vp, &dm).unwrap().loglik;
        prop_assert!((before - after).abs() <= 1e-10);
    }

    #[test]
    fn response_shift_moves_only_the_intercept(seed in 0u64..1_000_000, c in -50.0f64..50.0) {
        let (dm, vp) = tiny_design(seed, 1, false);
        let a = log_likelihood(&vp, &dm).unwrap();
        let b = log_likelihood(&vp, &dm.with_affine_response(1.0, c)).unwrap();
        prop_assert!((b.beta_hat[0] - a.beta_hat[0] - c).abs() <= 1e-9 * c.abs().max(1.0));
        prop_assert!((b.beta_hat[1] - a.beta_hat[1]).abs() <= 1e-9);
        prop_assert!((b.loglik - a.loglik).abs() <= 1e-8);
    }
}

#[test]
fn profile_beta_matches_dense_normal_equations_on_three_clusters() {
    for seed in 0..50 {
        let (ds, spec, vp) = tiny_instance(seed, 2, true);
        let dm = build_design(&ds, &spec).unwrap();
        if dm.n_clusters() != 3 {
            continue;
        }
        let (beta, cov) = profile_beta(&vp, &dm).unwrap();
        let (_, oracle) = dense_loglik(&vp, &dm);
        assert!((&beta - &oracle).amax() <= 1e-9);
        assert!((&cov - cov.transpose()).amax() <= 1e-12);
        assert!(cov.symmetric_eigenvalues().min() >= 0.0);
        return;
    }
    panic!("no three-cluster instance generated");
}

#[test]
fn zero_psi_reduces_to_ols() {
    let (dm, _) = tiny_design(11, 1, false);
    let vp = VarianceParams::new(DMatrix::zeros(1, 1), 0.7, None).unwrap();
    let lv = log_likelihood(&vp, &dm).unwrap();
    let x = dm.stacked_x();
    let y = dm.stacked_y();
    let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    assert!((&lv.beta_hat - &ols).amax() <= 1e-10);
    let rss = (&y - &x * &ols).norm_squared();
    let n = dm.n_obs as f64;
    let dev = n * (2.0 * std::f64::consts::PI * 0.7).ln() + rss / 0.7;
    assert!((lv.deviance - dev).abs() <= 1e-9);
}

#[test]
fn ar1_likelihood_is_continuous_at_zero() {
    let (ds, spec, vp) = tiny_instance(5, 2, true);
    let dm = build_design(&ds, &spec).unwrap();
    let iid_spec = ModelSpec {
        residual: hierarch::Residual::Iid,
        ..spec
    };
    let dm_iid = build_design(&ds, &iid_spec).unwrap();
    let at = |rho: f64| {
        let v = VarianceParams {
            rho: Some(rho),
            ..vp.clone()
        };
        log_likelihood(&v, &dm).unwrap().loglik
    };
    let iid = log_likelihood(
        &VarianceParams {
            rho: None,
            ..vp.clone()
        },
        &dm_iid,
    )
    .unwrap()
    .loglik;
    assert!((at(0.0) - iid).abs() <= 1e-12);
    assert!((at(1e-9) - iid).abs() <= 1e-7);
    assert!((at(-1e-9) - iid).abs() <= 1e-7);
}

#[test]
fn single_observation_standard_normal() {
    let ds = Dataset::from_columns(
        "g",
        vec![Some("a".into())],
        vec![("y".into(), Column::Numeric(vec![0.0]))],
        None,
    )
    .unwrap();
    let spec = ModelSpec::from_flags("y", "1", "1 | g", "iid").unwrap();
    let dm = build_design(&ds, &spec).unwrap();
    let vp = VarianceParams::random_intercept(0.0, 1.0).unwrap();
    let lv = log_likelihood(&vp, &dm).unwrap();
    // β̂ equals the single response, so the residual is zero.
    assert!((lv.loglik + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() <= 1e-15);
}
