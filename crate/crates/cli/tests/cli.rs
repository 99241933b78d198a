use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierarch::simulate::SimulationParams;
use hierarch::FitResult;
use serde_json::Value;
use tempfile::TempDir;

fn hierarch(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierarch"))
        .args(args)
        .current_dir(dir)
        .env_remove("HIERARCH_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TRIAL_FIT: &[&str] = &[
    "--response",
    "y",
    "--fixed",
    "1 + t + x + t:x",
    "--random",
    "1 + t | child",
];

/// Simulated trial data in a fresh directory.
fn trial_dir(seed: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = hierarch(
        &[
            "simulate",
            "--preset",
            "trial",
            "--seed",
            seed,
            "--out",
            "trial.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn fit_trial(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--data", "trial.csv", "--out", out];
    args.extend_from_slice(TRIAL_FIT);
    args.extend_from_slice(extra);
    hierarch(&args, dir)
}

#[test]
fn simulate_is_reproducible_and_reports_completeness() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = hierarch(
        &[
            "simulate",
            "--preset",
            "trial",
            "--seed",
            "7",
            "--out",
            "a.csv",
            "--params-out",
            "p.json",
        ],
        p,
    );
    let b = hierarch(&["simulate", "--params", "p.json", "--out", "b.csv"], p);
    assert!(a.status.success() && b.status.success());
    assert_eq!(
        std::fs::read(p.join("a.csv")).unwrap(),
        std::fs::read(p.join("b.csv")).unwrap()
    );
    assert!(stdout(&a).contains("clusters: 180"));
    assert!(stdout(&a).contains('%'));
    assert_valid(
        &schema("simulation_params.schema.json"),
        &read_json(&p.join("p.json")),
    );

    let mut params = read_json(&p.join("p.json"));
    params["dropout"] = serde_json::json!({"kind": "none"});
    std::fs::write(p.join("none.json"), params.to_string()).unwrap();
    let c = hierarch(&["simulate", "--params", "none.json", "--out", "c.csv"], p);
    assert!(c.status.success());
    assert!(stdout(&c).contains("rows: 1080"), "{}", stdout(&c));
    assert!(stdout(&c).contains("(100.0%)"), "{}", stdout(&c));
}

#[test]
fn simulate_rejects_invalid_params() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut params = serde_json::to_value(SimulationParams::tutoring_trial(1)).unwrap();
    params["sigma_e2"] = serde_json::json!(-1.0);
    std::fs::write(p.join("bad.json"), params.to_string()).unwrap();
    let o = hierarch(&["simulate", "--params", "bad.json", "--out", "x.csv"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(!p.join("x.csv").exists());
    assert!(!schema("simulation_params.schema.json").is_valid(&params));
}

#[test]
fn clustered_params_validate_against_schema() {
    let params = serde_json::json!({
        "design": "clustered",
        "beta": [-0.013, 0.56],
        "sigma_u2": 0.169,
        "sigma_e2": 0.848,
        "clusters": 65,
        "sizes": {"kind": "uniform", "min": 2, "max": 198},
        "covariates": [{"name": "lrt", "level": "individual", "dist": "normal", "mean": 0.0, "sd": 1.0}],
        "seed": 4
    });
    assert_valid(&schema("simulation_params.schema.json"), &params);
    let parsed: SimulationParams = serde_json::from_value(params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        serde_json::to_string(&parsed).unwrap(),
    )
    .unwrap();
    let o = hierarch(
        &["simulate", "--params", "c.json", "--out", "c.csv"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("clusters: 65"));
}

#[test]
fn fit_writes_schema_valid_deterministic_json() {
    let dir = trial_dir("11");
    let p = dir.path();
    assert!(fit_trial(p, "a.json", &[]).status.success());
    assert!(fit_trial(p, "b.json", &["--threads", "2"]).status.success());
    let a = std::fs::read(p.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.json")).unwrap());

    let doc = read_json(&p.join("a.json"));
    assert_valid(&schema("fit_result.schema.json"), &doc);
    let fit: FitResult = serde_json::from_value(doc).unwrap();
    assert_eq!(fit.counts.clusters, 180);
    assert_eq!(fit.fixed.len(), 4);
    // Every float survives the text round trip exactly.
    let again = serde_json::to_string_pretty(&fit).unwrap() + "\n";
    assert_eq!(again.as_bytes(), a.as_slice());

    let ar1 = fit_trial(p, "ar1.json", &["--resid", "ar1:occ"]);
    assert!(ar1.status.success());
    let doc = read_json(&p.join("ar1.json"));
    assert_valid(&schema("fit_result.schema.json"), &doc);
    assert!(doc["variance"]["rho"].is_number());
}

#[test]
fn fit_from_spec_file_matches_flags() {
    let dir = trial_dir("12");
    let p = dir.path();
    let spec = serde_json::json!({
        "response": "y",
        "fixed": ["1", "t", "x", "t:x"],
        "random": {"cluster": "child", "terms": ["1", "t"]},
        "residual": {"kind": "iid"}
    });
    std::fs::write(p.join("spec.json"), spec.to_string()).unwrap();
    let a = hierarch(
        &[
            "fit",
            "--data",
            "trial.csv",
            "--spec",
            "spec.json",
            "--out",
            "a.json",
        ],
        p,
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(fit_trial(p, "b.json", &[]).status.success());
    assert_eq!(
        std::fs::read(p.join("a.json")).unwrap(),
        std::fs::read(p.join("b.json")).unwrap()
    );
}

#[test]
fn fit_table_is_rounded() {
    let dir = trial_dir("13");
    let o = fit_trial(dir.path(), "a.json", &["--table"]);
    let text = stdout(&o);
    assert!(text.contains("Deviance") && text.contains("var(1)") && text.contains("t:x"));
    let fit: FitResult = serde_json::from_value(read_json(&dir.path().join("a.json"))).unwrap();
    assert!(text.contains(&format!("{:.3}", fit.fixed[0].estimate)));
}

#[test]
fn fit_exit_codes() {
    let dir = trial_dir("14");
    let p = dir.path();
    let missing = hierarch(
        &[
            "fit",
            "--data",
            "nope.csv",
            "--response",
            "y",
            "--fixed",
            "1",
            "--random",
            "1 | g",
            "--out",
            "m.json",
        ],
        p,
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(!p.join("m.json").exists());

    let bad_term = fit_trial(p, "b.json", &["--resid", "ar2"]);
    assert_eq!(bad_term.status.code(), Some(1));

    let unknown = hierarch(
        &[
            "fit",
            "--data",
            "trial.csv",
            "--response",
            "y",
            "--fixed",
            "1 + zzz",
            "--random",
            "1 | child",
            "--out",
            "u.json",
        ],
        p,
    );
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!p.join("u.json").exists());

    let capped = fit_trial(p, "c.json", &["--max-iter", "1"]);
    assert_eq!(capped.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&capped.stderr).contains("did not converge"));
    assert!(!p.join("c.json").exists());
}

#[test]
fn predict_writes_caterpillar_and_lines() {
    let dir = trial_dir("15");
    let p = dir.path();
    assert!(fit_trial(p, "m2.json", &[]).status.success());
    let o = hierarch(
        &[
            "predict",
            "--fit",
            "m2.json",
            "--data",
            "trial.csv",
            "--caterpillar",
            "cat.csv",
            "--lines",
            "lines.csv",
            "--grid",
            "t=0,0.2,0.4,0.6,0.8,1",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cat = std::fs::read_to_string(p.join("cat.csv")).unwrap();
    assert_eq!(
        cat.lines().next().unwrap(),
        "rank,cluster,u_hat,cond_sd,low,high,n,separable"
    );
    assert_eq!(cat.lines().count(), 181);
    let lines = std::fs::read_to_string(p.join("lines.csv")).unwrap();
    assert_eq!(
        lines.lines().next().unwrap(),
        "cluster,t,population,predicted"
    );
    assert_eq!(lines.lines().count(), 1 + 180 * 6);

    let empty = hierarch(
        &[
            "predict",
            "--fit",
            "m2.json",
            "--data",
            "trial.csv",
            "--lines",
            "empty.csv",
            "--grid",
            "t=",
        ],
        p,
    );
    assert!(empty.status.success());
    assert_eq!(
        std::fs::read_to_string(p.join("empty.csv")).unwrap(),
        "cluster,t,population,predicted\n"
    );
}

#[test]
fn predict_rejects_mismatched_data() {
    let dir = trial_dir("16");
    let p = dir.path();
    assert!(fit_trial(p, "m2.json", &[]).status.success());
    let o = hierarch(
        &[
            "simulate",
            "--preset",
            "trial",
            "--seed",
            "99",
            "--out",
            "other.csv",
        ],
        p,
    );
    assert!(o.status.success());
    let o = hierarch(
        &[
            "predict",
            "--fit",
            "m2.json",
            "--data",
            "other.csv",
            "--caterpillar",
            "cat.csv",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!p.join("cat.csv").exists());
}

#[test]
fn compare_fits_and_deviances() {
    let dir = trial_dir("17");
    let p = dir.path();
    assert!(fit_trial(p, "m2.json", &[]).status.success());
    assert!(fit_trial(p, "m3.json", &["--resid", "ar1:occ"])
        .status
        .success());

    let same = hierarch(&["compare", "m2.json", "m2.json"], p);
    assert!(same.status.success());
    assert!(stdout(&same).starts_with("L = 0.000"), "{}", stdout(&same));

    let ar1 = hierarch(&["compare", "m3.json", "m2.json", "--json"], p);
    assert!(ar1.status.success());
    let t: Value = serde_json::from_str(&stdout(&ar1)).unwrap();
    assert_eq!(t["df"], 1);
    let m2: FitResult = serde_json::from_value(read_json(&p.join("m2.json"))).unwrap();
    let m3: FitResult = serde_json::from_value(read_json(&p.join("m3.json"))).unwrap();
    assert!(
        (t["statistic"].as_f64().unwrap() - (m2.deviance - m3.deviance).max(0.0)).abs() < 1e-12
    );

    let published = hierarch(&["compare", "--deviances", "11509,11011", "--df", "1"], p);
    assert!(stdout(&published).starts_with("L = 498.000, df = 1"));

    let halved = hierarch(
        &[
            "compare",
            "--deviances",
            "7.45,0",
            "--df",
            "1",
            "--boundary",
        ],
        p,
    );
    let text = stdout(&halved);
    assert!(
        text.contains("p = 0.0063") && text.contains("boundary-adjusted p = 0.0032"),
        "{text}"
    );

    let reversed = hierarch(&["compare", "--deviances", "100,110", "--df", "1"], p);
    assert_eq!(reversed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&reversed.stderr).contains("may not be nested"));
}
