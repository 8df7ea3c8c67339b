mod common;

use std::fs;

use common::scalar_survival;
use irg_core::experiment::{
    emit_report, load_config, run_branching_validation, run_experiment, run_scaling_experiment,
    run_supercritical, CheckStatus, ConfigFile, ExperimentConfig, RUNS_HEADER,
};
use irg_core::fixed_point::{survival_prob, IterationConfig};
use irg_core::kernel::{KernelDoc, KernelSpec, TypeSpace};
use irg_core::Error;

fn config(kernel: &str, mode: &str, n_grid: &[u64], reps: usize, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"{{"experiment_id": "it", "kernel_id": "k", "kernel": {kernel},
            "mode": "{mode}", "n_grid": {n_grid:?}, "replications": {reps},
            "master_seed": {seed}}}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn scalar(c: f64) -> String {
    format!(
        r#"{{"space": {{"labels": [1], "weights": [1]}}, "kernel": {{"builder": "constant", "c": {c}}}}}"#
    )
}

fn two_type() -> String {
    r#"{"space": {"labels": [0, 1], "weights": [0.5, 0.5]},
        "kernel": {"builder": "explicit", "matrix": [[0.3, 0.5], [0.5, 0.7]]}}"#
        .into()
}

fn emitted(cfg: &ExperimentConfig, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let report = pool.install(|| run_experiment(cfg)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    (
        fs::read(dir.path().join("report.json")).unwrap(),
        fs::read(dir.path().join("runs.csv")).unwrap(),
    )
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let cfg = config(
        &two_type(),
        "subcritical-scaling",
        &[500, 2000, 8000],
        4,
        11,
    );
    let first = emitted(&cfg, 1);
    assert_eq!(first, emitted(&cfg, 1));
    assert_eq!(first, emitted(&cfg, 8));
    let other = config(
        &two_type(),
        "subcritical-scaling",
        &[500, 2000, 8000],
        4,
        12,
    );
    assert_ne!(first.1, emitted(&other, 8).1);
}

#[test]
fn runs_csv_schema_and_records() {
    let cfg = config(&scalar(0.5), "subcritical-scaling", &[1000, 4000], 3, 5);
    let report = run_scaling_experiment(&cfg).unwrap();
    let (_, csv) = emitted(&cfg, 2);
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(RUNS_HEADER));
    assert_eq!(lines.count(), 6);
    for r in &report.runs {
        assert!(r.c1 <= r.n);
        assert_eq!(r.c1_over_logn, r.c1 as f64 / (r.n as f64).ln());
        assert!(r.elapsed_ms.is_none());
    }
    for p in &report.per_n {
        assert_eq!(p.c1_over_logn.count, 3);
        assert!(p.c1_over_logn.ci_low <= p.c1_over_logn.mean);
    }
    let prediction = report.prediction.unwrap();
    assert!((prediction - 1.0 / (0.5 - 1.0 - 0.5f64.ln())).abs() < 1e-6);
}

#[test]
fn supercritical_scalar_fraction() {
    let cfg = config(&scalar(2.0), "supercritical-fraction", &[100_000], 20, 3);
    let report = run_supercritical(&cfg).unwrap();
    let target = scalar_survival(2.0);
    let f = &report.fraction.unwrap()[0];
    assert!((f.mean_c1_over_n - target).abs() <= 0.02 * target, "{f:?}");
    assert!((f.rho - target).abs() < 1e-8);
}

#[test]
fn supercritical_rank1_fraction_matches_aggregate_survival() {
    let kernel = r#"{"space": {"labels": [1, 2], "weights": [0.5, 0.5]},
        "kernel": {"builder": "rank1", "phi": [1, 2]}}"#;
    let cfg = config(kernel, "supercritical-fraction", &[100_000], 10, 4);
    let report = run_supercritical(&cfg).unwrap();
    assert!((report.operator.op_norm - 2.5).abs() < 1e-10);
    let k = cfg.kernel.build().unwrap();
    let s = survival_prob(&k, &IterationConfig::default()).unwrap();
    let agg = 0.5 * (s.rho[0] + s.rho[1]);
    let f = &report.fraction.unwrap()[0];
    assert!(
        (f.mean_c1_over_n - agg).abs() <= 0.03 * agg,
        "{f:?} vs {agg}"
    );
}

#[test]
fn supercritical_mode_refuses_subcritical_kernel() {
    let cfg = config(&two_type(), "supercritical-fraction", &[1000], 1, 1);
    assert!(matches!(run_supercritical(&cfg), Err(Error::Refused(_))));
}

#[test]
fn critical_scaling_report_has_explicit_null_prediction() {
    let cfg = config(&scalar(2.0), "subcritical-scaling", &[1000, 4000], 2, 8);
    let (json, _) = emitted(&cfg, 2);
    let value: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert!(value.as_object().unwrap().contains_key("prediction"));
    assert!(value["prediction"].is_null());
    assert!(!value["warnings"].as_array().unwrap().is_empty());
    assert!(value["scaling_fit"]["alpha_relative_error"].is_null());
}

#[test]
fn branching_validation_scalar_half_passes() {
    let cfg = config(&scalar(0.5), "branching-validation", &[], 1, 1);
    let report = run_branching_validation(&cfg).unwrap();
    let v = report.branching.unwrap();
    for c in &v.checks {
        assert_ne!(c.status, CheckStatus::Fail, "{c:?}");
    }
    assert!(v.all_passed);
    assert!(v
        .checks
        .iter()
        .any(|c| c.name == "tail rate" && c.status == CheckStatus::Pass));
    assert!(v
        .checks
        .iter()
        .any(|c| c.name == "duality" && c.status == CheckStatus::Pass));
}

#[test]
fn branching_validation_at_criticality() {
    let mut cfg = config(&scalar(1.0), "branching-validation", &[], 1, 1);
    cfg.branching.samples = 200_000;
    cfg.branching.cap = 100_000;
    let report = run_branching_validation(&cfg).unwrap();
    assert_eq!(report.r_kappa.lo, 1.0);
    assert!(report.prediction.is_none());
    let v = report.branching.unwrap();
    let tail = v.checks.iter().find(|c| c.name == "tail rate").unwrap();
    match &v.tail {
        None => assert_eq!(tail.status, CheckStatus::NotApplicable),
        Some(fit) => assert!(fit.rate.abs() <= 3.0 * fit.stderr + 1e-3, "{fit:?}"),
    }
}

#[test]
fn branching_validation_two_type_tail() {
    let cfg = config(&two_type(), "branching-validation", &[], 1, 2);
    let report = run_branching_validation(&cfg).unwrap();
    let expected = report.r_kappa.midpoint().ln();
    let v = report.branching.unwrap();
    let rate = v.tail.as_ref().unwrap().rate;
    assert!(
        (rate - expected).abs() <= 0.05 * expected,
        "{rate} vs {expected}"
    );
    assert!(v.all_passed, "{:?}", v.checks);
}

#[test]
fn load_config_distinguishes_documents() {
    let dir = tempfile::tempdir().unwrap();
    let kernel_path = dir.path().join("kernel.json");
    fs::write(&kernel_path, scalar(0.5)).unwrap();
    match load_config(&kernel_path).unwrap() {
        ConfigFile::Kernel(doc) => assert_eq!(
            doc,
            KernelDoc {
                space: TypeSpace::single(),
                kernel: KernelSpec::Constant { c: 0.5 }
            }
        ),
        other => panic!("{other:?}"),
    }

    let exp_path = dir.path().join("exp.json");
    let text = format!(
        r#"{{"experiment_id": "e", "kernel_id": "k", "kernel": {}, "mode": "subcritical-scaling",
            "n_grid": [100]}}"#,
        scalar(0.5)
    );
    fs::write(&exp_path, text).unwrap();
    assert!(matches!(
        load_config(&exp_path).unwrap(),
        ConfigFile::Experiment(_)
    ));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"mode": "subcritical-scaling", "n_grid": [10]}"#).unwrap();
    assert!(matches!(load_config(&bad), Err(Error::Config(_))));
    fs::write(&bad, "not json").unwrap();
    assert!(matches!(load_config(&bad), Err(Error::Config(_))));
    assert!(matches!(
        load_config(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn config_invariants_are_enforced() {
    let base = |grid: &str, reps: u64| {
        format!(
            r#"{{"experiment_id": "e", "kernel_id": "k", "kernel": {}, "mode": "subcritical-scaling",
                "n_grid": {grid}, "replications": {reps}}}"#,
            scalar(0.5)
        )
    };
    assert!(ExperimentConfig::from_json(&base("[100, 1000]", 1)).is_ok());
    for (grid, reps) in [
        ("[]", 1),
        ("[1000, 100]", 1),
        ("[100, 100]", 1),
        ("[100]", 0),
    ] {
        assert!(
            ExperimentConfig::from_json(&base(grid, reps)).is_err(),
            "{grid} x {reps}"
        );
    }
    let unknown = base("[100]", 1).replace("\"mode\"", "\"colour\": 1, \"mode\"");
    assert!(ExperimentConfig::from_json(&unknown).is_err());
}
