use std::fmt::Write;

use hierarch::{Estimate, FitResult};

fn row(out: &mut String, label: &str, e: &Estimate) {
    let se = e.se.map_or_else(|| "-".to_owned(), |s| format!("{s:.3}"));
    let _ = writeln!(out, "  {label:<28}{:>10.3}{se:>10}", e.estimate);
}

/// Estimates rounded to three decimals, one block per parameter group.
pub fn render(fit: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", fit.model);
    let _ = writeln!(
        out,
        "n = {}, clusters = {}{}",
        fit.counts.n,
        fit.counts.clusters,
        if fit.counts.dropped > 0 {
            format!(" ({} rows with missing values dropped)", fit.counts.dropped)
        } else {
            String::new()
        }
    );
    let _ = writeln!(out, "\n  {:<28}{:>10}{:>10}", "Fixed effects", "Est", "SE");
    for e in &fit.fixed {
        row(&mut out, &e.label, e);
    }
    let _ = writeln!(out, "\n  Random part");
    for e in fit.variance_components.iter().chain(&fit.correlations) {
        row(&mut out, &e.label, e);
    }
    let _ = writeln!(out);
    if let Some(icc) = fit.icc {
        let _ = writeln!(out, "  {:<28}{icc:>10.3}", "ICC/VPC");
    }
    let _ = writeln!(out, "  {:<28}{:>10.3}", "Deviance", fit.deviance);
    out
}
