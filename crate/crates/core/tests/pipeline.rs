use ate_universe::harness::{self, EstimatorSettings, HarnessError, RunPlan, Scenario, ESTIMATES_FILE, REPORT_DIR, THRESHOLD_GRID};
use ate_universe::estimators::ESTIMATOR_IDS;
use ate_universe::metrics::PositivityThresholds;
use ate_universe::universe::PriorConfig;
use std::fs;
use std::path::Path;
use std::process::Command;

fn small_plan(out: &Path, n_dgps: usize, n_reps: usize, sample_sizes: Vec<usize>) -> RunPlan {
    let scenario = |name: &str, k, hte| Scenario {
        name: name.into(),
        prior: PriorConfig { u: 2, h: 1, c: 4, k, hte, q: 100.0, b: 0.0, eta: 1.0, rho: 1.0, tol: 0.01 },
        b_range: Some([-0.1, 0.1]),
        eta_range: Some([0.1, 10.0]),
        rho_range: Some([0.1, 10.0]),
    };
    RunPlan {
        master_seed: 77,
        scenarios: vec![scenario("main", 1, false), scenario("pairs", 2, true)],
        n_dgps,
        n_reps,
        sample_sizes,
        estimators: ESTIMATOR_IDS.iter().map(|s| s.to_string()).collect(),
        output_dir: out.to_path_buf(),
        positivity: PositivityThresholds::default(),
        estimator_settings: EstimatorSettings::default(),
        max_iterations: 1000,
    }
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn summary_bytes(out: &Path) -> Vec<Vec<u8>> {
    let mut files: Vec<_> = fs::read_dir(out.join(harness::SUMMARY_DIR))
        .unwrap()
        .chain(fs::read_dir(out.join(REPORT_DIR)).unwrap())
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn desk_plan_writes_every_record_and_resumes_for_free() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 20, 50, vec![100, 500]);
    let summary = harness::run(&plan, dir.path(), 1, false).unwrap();
    assert_eq!(summary.dgp_failures, 0);
    assert_eq!(summary.records_written, 20_000);
    let records = harness::read_records(&dir.path().join(ESTIMATES_FILE)).unwrap();
    assert_eq!(records.len(), 20_000);

    // one metrics row per (scenario, dgp, n, estimator), plus the header
    assert_eq!(line_count(&harness::metrics_path(dir.path())), 2 * 20 * 2 * 5 + 1);
    let coverage = dir.path().join(REPORT_DIR).join("coverage_table.csv");
    assert_eq!(line_count(&coverage), 2 * 2 * 5 + 1);
    let curves = dir.path().join(REPORT_DIR).join("reliability_bias.csv");
    assert_eq!(line_count(&curves), 2 * 2 * 5 * THRESHOLD_GRID + 1);

    let before = summary_bytes(dir.path());
    let again = harness::run(&plan, dir.path(), 1, true).unwrap();
    assert_eq!(again.records_written, 0);
    assert_eq!(again.records_skipped, 20_000);
    assert_eq!(summary_bytes(dir.path()), before);
}

#[test]
fn resume_after_a_torn_write_restores_the_same_records() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 2, 3, vec![80]);
    harness::run(&plan, dir.path(), 2, false).unwrap();
    let path = dir.path().join(ESTIMATES_FILE);
    let full = harness::canonical_records(&path).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let kept = lines.len() - 7;
    let mut torn = lines[..kept].join("\n");
    torn.push('\n');
    torn.push_str(&lines[kept][..lines[kept].len() / 2]);
    fs::write(&path, torn).unwrap();

    let resumed = harness::run(&plan, dir.path(), 2, true).unwrap();
    assert_eq!(resumed.records_written, 7);
    assert_eq!(harness::canonical_records(&path).unwrap(), full);
}

#[test]
fn existing_estimates_need_resume() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 1, 1, vec![60]);
    harness::run(&plan, dir.path(), 1, false).unwrap();
    let err = harness::simulate(&plan, dir.path(), 1, false).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stratified_reports_partition_the_dgps() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 4, 2, vec![60]);
    harness::run(&plan, dir.path(), 1, false).unwrap();
    let (rows, meta) = harness::read_metrics(dir.path()).unwrap();
    assert_eq!(meta.records, 2 * 4 * 2 * 5);
    let report = dir.path().join(REPORT_DIR);
    let mut stratified_rows = 0;
    for label in ["minimal", "moderate", "severe"] {
        let path = report.join(format!("coverage_table_{label}.csv"));
        if path.exists() {
            let count = rows.iter().filter(|r| r.positivity.name() == label).count();
            assert!(count > 0);
            stratified_rows += count;
        }
    }
    assert_eq!(stratified_rows, rows.len());
}

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ate-universe")).args(args).env("RUST_LOG", "error").output().unwrap().status.code().unwrap()
}

#[test]
fn command_line_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("plan.json");
    let plan = small_plan(&out, 1, 1, vec![60]);
    fs::write(&config, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    let code = cli(&["run", "--config", config.to_str().unwrap(), "--workers", "1"]);
    assert!(code == 0 || code == 3, "exit code {code}");
    assert!(out.join(ESTIMATES_FILE).exists());
    assert_eq!(cli(&["report", "--out", out.to_str().unwrap()]), 0);

    let mut bad = plan.clone();
    bad.estimators.push("bart".into());
    fs::write(&config, serde_json::to_string(&bad).unwrap()).unwrap();
    assert_eq!(cli(&["run", "--config", config.to_str().unwrap()]), 2);
    assert_eq!(cli(&["report", "--out", dir.path().join("missing").to_str().unwrap()]), 1);
}

#[test]
fn shipped_plans_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "smoke.json"] {
        let plan = RunPlan::load(&dir.join(name)).unwrap();
        plan.validate().unwrap();
    }
}
