//! Two-level linear mixed models fitted by maximum likelihood.
//!
//! Observations are grouped into clusters (pupils in schools, occasions within
//! children). The marginal covariance of cluster `j` is
//! `Z_j Ψ Z_jᵀ + σ_e² R_j`, where `R_j` is the identity or an AR(1)
//! correlation over integer occasion gaps.

pub mod dataset;
pub mod design;
pub mod error;
pub mod inference;
pub mod likelihood;
pub mod optimizer;
pub mod prediction;
pub mod simulate;

pub use dataset::{Column, ColumnKind, Dataset, GroupIndex, Schema};
pub use design::{build_design, DesignMatrices, ModelSpec, RandomPart, Residual, Term};
pub use error::{Error, Result};
pub use likelihood::{log_likelihood, LikelihoodValue, VarianceParams};
pub use optimizer::{
    fit, fit_design, Estimate, FitOptions, FitResult, FitStatus, ThetaLayout, ThetaVector,
};
