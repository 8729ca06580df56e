//! Run orchestration: plan parsing, DGP sampling, dataset simulation with every
//! estimator, aggregation and reporting. Every random stream is keyed through
//! [`derive_seed`], so the output does not depend on the worker count.

use crate::datagen::sample_dataset;
use crate::estimators::{is_known_estimator, EstimateResult, EstimationContext, EstimatorConfig, Fluctuation, ESTIMATOR_IDS};
use crate::mechanisms::{sample_dgp, Dgp, DgpError, SamplerOptions};
use crate::metrics::{
    coverage_summary, default_thresholds, dgp_metrics, reliability_curve, stratum_of, CurveMetric, DgpMetrics, PositivityLabel,
    PositivityThresholds, ReliabilityCurve,
};
use crate::seed::{self, derive_seed};
use crate::universe::PriorConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

pub const ESTIMATES_FILE: &str = "estimates.jsonl";
pub const SUMMARY_DIR: &str = "summary";
pub const REPORT_DIR: &str = "report";
pub const THRESHOLD_GRID: usize = 200;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("missing summaries in {0}; run summarize first")]
    MissingSummaries(PathBuf),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
    move |source| HarnessError::Json { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv { path: path.to_path_buf(), source }
}

/// A prior template plus uniform ranges for the per-DGP draws of `b`, `eta` and `rho`.
/// A missing range keeps the template value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub prior: PriorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSettings {
    pub g_truncation: f64,
    pub m_truncation: f64,
    pub fluctuation: Fluctuation,
    pub cv_folds: Option<usize>,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        EstimatorSettings { g_truncation: d.g_truncation, m_truncation: d.m_truncation, fluctuation: d.fluctuation, cv_folds: d.cv_folds }
    }
}

impl EstimatorSettings {
    pub fn to_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            g_truncation: self.g_truncation,
            m_truncation: self.m_truncation,
            fluctuation: self.fluctuation,
            cv_folds: self.cv_folds,
            ..EstimatorConfig::default()
        }
    }
}

fn default_max_iterations() -> usize {
    crate::mechanisms::DEFAULT_MAX_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    #[serde(with = "seed::as_string")]
    pub master_seed: u64,
    pub scenarios: Vec<Scenario>,
    pub n_dgps: usize,
    pub n_reps: usize,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<String>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub positivity: PositivityThresholds,
    #[serde(default)]
    pub estimator_settings: EstimatorSettings,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn check_range(name: &str, r: Option<[f64; 2]>, lo_ok: impl Fn(f64) -> bool) -> Result<(), HarnessError> {
    if let Some([a, b]) = r {
        if !(a <= b) || !lo_ok(a) || !lo_ok(b) {
            return Err(HarnessError::Config(format!("{name} range [{a}, {b}] is invalid")));
        }
    }
    Ok(())
}

impl RunPlan {
    pub fn load(path: &Path) -> Result<RunPlan, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let plan: RunPlan = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.n_dgps == 0 || self.n_reps == 0 {
            return fail("n_dgps and n_reps must be at least 1".into());
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return fail("sample_sizes must be nonempty and positive".into());
        }
        if self.scenarios.is_empty() {
            return fail("no scenarios".into());
        }
        if self.estimators.is_empty() {
            return fail("no estimators".into());
        }
        for id in &self.estimators {
            if !is_known_estimator(id) {
                return fail(format!("unknown estimator {id:?}; known: {}", ESTIMATOR_IDS.join(", ")));
            }
        }
        let mut names = HashSet::new();
        for s in &self.scenarios {
            if s.name.is_empty() || s.name.contains(['/', '\\']) || !names.insert(&s.name) {
                return fail(format!("scenario name {:?} is empty, duplicated or not a valid directory name", s.name));
            }
            check_range("b", s.b_range, |v| v.abs() <= 1.0)?;
            check_range("eta", s.eta_range, |v| v > 0.0)?;
            check_range("rho", s.rho_range, |v| v > 0.0)?;
            s.prior.validate().map_err(|e| HarnessError::Config(format!("scenario {}: {e}", s.name)))?;
        }
        let e = &self.estimator_settings;
        if !(e.g_truncation > 0.0 && e.g_truncation < 0.5) || !(e.m_truncation > 0.0 && e.m_truncation < 0.5) {
            return fail("truncation levels must lie in (0, 0.5)".into());
        }
        if e.cv_folds.is_some_and(|v| v < 2) {
            return fail("cv_folds must be at least 2".into());
        }
        Ok(())
    }
}

pub fn dgp_id(index: usize) -> String {
    format!("dgp{index:04}")
}

/// Draws the per-DGP hyperparameters from the scenario ranges.
pub fn draw_prior(plan: &RunPlan, scenario: &Scenario, index: usize) -> PriorConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.master_seed, &scenario.name, index as u64, 0, "hyper"));
    let mut draw = |r: Option<[f64; 2]>, fixed: f64| match r {
        Some([a, b]) if b > a => rng.random_range(a..b),
        Some([a, _]) => a,
        None => fixed,
    };
    let mut prior = scenario.prior.clone();
    prior.b = draw(scenario.b_range, prior.b);
    prior.eta = draw(scenario.eta_range, prior.eta);
    prior.rho = draw(scenario.rho_range, prior.rho);
    prior
}

fn dgp_dir(out: &Path, scenario: &str) -> PathBuf {
    out.join("dgps").join(scenario)
}

fn dgp_path(out: &Path, scenario: &str, index: usize) -> PathBuf {
    dgp_dir(out, scenario).join(format!("{}.json", dgp_id(index)))
}

fn failure_path(out: &Path, scenario: &str, index: usize) -> PathBuf {
    dgp_dir(out, scenario).join(format!("{}.failed.json", dgp_id(index)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DgpFailure {
    scenario: String,
    dgp_id: String,
    prior: PriorConfig,
    error: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {workers} workers: {e}")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub dgps_sampled: usize,
    pub dgp_failures: usize,
    pub records_written: usize,
    pub records_skipped: usize,
    pub estimate_failures: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.dgp_failures > 0 || self.estimate_failures > 0 {
            3
        } else {
            0
        }
    }
}

/// Samples every DGP of every scenario, skipping documents already on disk.
pub fn sample_dgps(plan: &RunPlan, out: &Path, workers: usize) -> Result<RunSummary, HarnessError> {
    plan.validate()?;
    let opts = SamplerOptions { max_iterations: plan.max_iterations, ..SamplerOptions::default() };
    let mut units = Vec::new();
    for s in &plan.scenarios {
        let dir = dgp_dir(out, &s.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        units.extend((0..plan.n_dgps).map(|j| (s, j)));
    }
    let outcomes: Vec<Result<bool, HarnessError>> = pool(workers)?.install(|| {
        units
            .par_iter()
            .map(|&(s, j)| {
                let path = dgp_path(out, &s.name, j);
                if path.exists() {
                    return Ok(true);
                }
                let prior = draw_prior(plan, s, j);
                let seed = derive_seed(plan.master_seed, &s.name, j as u64, 0, "dgp");
                match sample_dgp(&prior, seed, &opts) {
                    Ok(dgp) => {
                        let text = serde_json::to_vec_pretty(&dgp).map_err(json_err(&path))?;
                        write_atomic(&path, &text)?;
                        Ok(true)
                    }
                    Err(err @ DgpError::FeasibilityExhausted { .. }) => {
                        log::warn!("{} {}: {err}", s.name, dgp_id(j));
                        let fail = DgpFailure { scenario: s.name.clone(), dgp_id: dgp_id(j), prior, error: err.to_string() };
                        let fpath = failure_path(out, &s.name, j);
                        write_atomic(&fpath, &serde_json::to_vec_pretty(&fail).map_err(json_err(&fpath))?)?;
                        Ok(false)
                    }
                    Err(err) => Err(HarnessError::Config(format!("{} {}: {err}", s.name, dgp_id(j)))),
                }
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    for o in outcomes {
        if o? {
            summary.dgps_sampled += 1;
        } else {
            summary.dgp_failures += 1;
        }
    }
    Ok(summary)
}

pub fn load_dgp(out: &Path, scenario: &str, index: usize) -> Result<Option<Dgp>, HarnessError> {
    let path = dgp_path(out, scenario, index);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&text).map(Some).map_err(json_err(&path))
}

/// One estimator applied to one simulated dataset. Keys are
/// `(scenario, dgp_id, rep, n, estimator_id)`; failed estimates carry `error`
/// and null numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub scenario: String,
    pub dgp_id: String,
    pub rep: usize,
    pub n: usize,
    pub estimator_id: String,
    pub point: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub wall_seconds: f64,
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub type RecordKey = (String, String, usize, usize, String);

impl EstimateRecord {
    pub fn key(&self) -> RecordKey {
        (self.scenario.clone(), self.dgp_id.clone(), self.rep, self.n, self.estimator_id.clone())
    }

    fn finite(v: f64) -> Option<f64> {
        v.is_finite().then_some(v)
    }

    fn from_result(scenario: &str, dgp: &str, rep: usize, n: usize, id: &str, secs: f64, r: Result<EstimateResult, String>) -> Self {
        let mut rec = EstimateRecord {
            scenario: scenario.to_string(),
            dgp_id: dgp.to_string(),
            rep,
            n,
            estimator_id: id.to_string(),
            point: None,
            se: None,
            ci_low: None,
            ci_high: None,
            wall_seconds: secs,
            diagnostics: BTreeMap::new(),
            error: None,
        };
        match r {
            Ok(e) if e.point.is_finite() && e.se.is_finite() => {
                rec.point = Some(e.point);
                rec.se = Some(e.se);
                rec.ci_low = Self::finite(e.ci_low);
                rec.ci_high = Self::finite(e.ci_high);
                rec.diagnostics = e.diagnostics.into_iter().filter(|(_, v)| v.is_finite()).collect();
            }
            Ok(e) => rec.error = Some(format!("non-finite estimate {} (se {})", e.point, e.se)),
            Err(msg) => rec.error = Some(msg),
        }
        rec
    }

    /// The estimate as a result, or `None` for a failed record.
    pub fn result(&self) -> Option<EstimateResult> {
        let (point, se) = (self.point?, self.se?);
        let mut r = EstimateResult::new(&self.estimator_id, point, se, self.diagnostics.clone());
        r.ci_low = self.ci_low?;
        r.ci_high = self.ci_high?;
        Some(r)
    }
}

/// Reads complete records; a torn final line from an interrupted run is cut off the file.
pub fn read_records(path: &Path) -> Result<Vec<EstimateRecord>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut good_bytes = 0u64;
    let mut torn = false;
    for line in BufReader::new(file).split(b'\n') {
        let line = line.map_err(io_err(path))?;
        if torn {
            return Err(HarnessError::Config(format!("{}: malformed record before end of file", path.display())));
        }
        match serde_json::from_slice::<EstimateRecord>(&line) {
            Ok(r) => {
                records.push(r);
                good_bytes += line.len() as u64 + 1;
            }
            Err(_) if line.iter().all(u8::is_ascii_whitespace) => good_bytes += line.len() as u64 + 1,
            Err(_) => torn = true,
        }
    }
    if torn {
        log::warn!("{}: dropping an incomplete final record", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_bytes).map_err(io_err(path))?;
    }
    Ok(records)
}

/// Serialized appends to the estimates file, one unit's records per flush.
struct Appender {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self, HarnessError> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Appender { path: path.to_path_buf(), writer: Mutex::new(BufWriter::new(file)) })
    }

    fn append(&self, records: &[EstimateRecord]) -> Result<(), HarnessError> {
        let mut w = self.writer.lock().expect("appender lock");
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(json_err(&self.path))?;
            w.write_all(b"\n").map_err(io_err(&self.path))?;
        }
        w.flush().map_err(io_err(&self.path))
    }
}

/// Simulates every `(dgp, rep, n)` dataset and appends one record per estimator.
/// With `resume`, keys already present are skipped; without it an existing
/// estimates file is an error.
pub fn simulate(plan: &RunPlan, out: &Path, workers: usize, resume: bool) -> Result<RunSummary, HarnessError> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(ESTIMATES_FILE);
    if path.exists() && !resume {
        let empty = fs::metadata(&path).map_err(io_err(&path))?.len() == 0;
        if !empty {
            return Err(HarnessError::Config(format!("{} exists; pass --resume to continue it", path.display())));
        }
    }
    let done: HashSet<RecordKey> = read_records(&path)?.iter().map(EstimateRecord::key).collect();
    let config = plan.estimator_settings.to_config();

    let mut dgps: Vec<(&Scenario, usize, Dgp)> = Vec::new();
    for s in &plan.scenarios {
        for j in 0..plan.n_dgps {
            if let Some(d) = load_dgp(out, &s.name, j)? {
                dgps.push((s, j, d));
            }
        }
    }
    let mut units = Vec::new();
    for (d, (s, j, _)) in dgps.iter().enumerate() {
        for rep in 0..plan.n_reps {
            for &n in &plan.sample_sizes {
                let todo: Vec<&str> = plan
                    .estimators
                    .iter()
                    .map(String::as_str)
                    .filter(|id| !done.contains(&(s.name.clone(), dgp_id(*j), rep, n, id.to_string())))
                    .collect();
                if !todo.is_empty() {
                    units.push((d, rep, n, todo));
                }
            }
        }
    }
    let skipped = dgps.len() * plan.n_reps * plan.sample_sizes.len() * plan.estimators.len()
        - units.iter().map(|u| u.3.len()).sum::<usize>();
    let appender = Appender::open(&path)?;
    let results: Vec<Result<(usize, usize), HarnessError>> = pool(workers)?.install(|| {
        units
            .par_iter()
            .map(|(d, rep, n, todo)| {
                let (s, j, dgp) = &dgps[*d];
                let (rep, n) = (*rep, *n);
                let data_seed = derive_seed(plan.master_seed, &s.name, *j as u64, rep as u64, &format!("data/n={n}"));
                let est_seed = derive_seed(plan.master_seed, &s.name, *j as u64, rep as u64, &format!("estimate/n={n}"));
                let data = sample_dataset(dgp, n, data_seed);
                let ctx = EstimationContext::new(&data, &config, est_seed);
                let records: Vec<EstimateRecord> = todo
                    .iter()
                    .map(|id| {
                        let start = Instant::now();
                        let r = ctx.estimate(id).map_err(|e| e.to_string());
                        EstimateRecord::from_result(&s.name, &dgp_id(*j), rep, n, id, start.elapsed().as_secs_f64(), r)
                    })
                    .collect();
                appender.append(&records)?;
                Ok((records.len(), records.iter().filter(|r| r.error.is_some()).count()))
            })
            .collect()
    });
    let mut summary = RunSummary { records_skipped: skipped, ..RunSummary::default() };
    for r in results {
        let (written, failed) = r?;
        summary.records_written += written;
        summary.estimate_failures += failed;
    }
    // failures recorded by earlier sessions still count
    if resume {
        summary.estimate_failures = read_records(&path)?.iter().filter(|r| r.error.is_some()).count();
    }
    for s in &plan.scenarios {
        summary.dgp_failures += (0..plan.n_dgps).filter(|&j| failure_path(out, &s.name, j).exists()).count();
    }
    summary.dgps_sampled = dgps.len();
    Ok(summary)
}

/// Records sorted by key and serialized without timing, for comparing runs.
pub fn canonical_records(path: &Path) -> Result<Vec<String>, HarnessError> {
    let mut recs = read_records(path)?;
    recs.sort_by_key(EstimateRecord::key);
    recs.iter()
        .map(|r| {
            let mut r = r.clone();
            r.wall_seconds = 0.0;
            serde_json::to_string(&r).map_err(json_err(path))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub dgp_id: String,
    pub n: usize,
    pub estimator: String,
    pub bias: f64,
    pub coverage: f64,
    pub mse: f64,
    pub n_reps: usize,
    pub n_failures: usize,
    pub truth: f64,
    pub positivity_index: f64,
    pub positivity: PositivityLabel,
}

impl MetricsRow {
    pub fn metrics(&self) -> DgpMetrics {
        DgpMetrics {
            dgp_id: self.dgp_id.clone(),
            estimator_id: self.estimator.clone(),
            n: self.n,
            bias: self.bias,
            coverage: self.coverage,
            mse: self.mse,
            n_reps: self.n_reps,
            n_failures: self.n_failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetadata {
    #[serde(with = "seed::as_string")]
    pub master_seed: u64,
    pub positivity: PositivityThresholds,
    pub scenarios: Vec<String>,
    pub q: BTreeMap<String, f64>,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<String>,
    pub records: usize,
    pub failed_records: usize,
    pub dgp_failures: usize,
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join(SUMMARY_DIR).join("dgp_metrics.csv")
}

fn metadata_path(out: &Path) -> PathBuf {
    out.join(SUMMARY_DIR).join("metadata.json")
}

/// Per-DGP bias, coverage and MSE for every `(scenario, dgp, n, estimator)` group.
pub fn summarize(plan: &RunPlan, out: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    plan.validate()?;
    let records = read_records(&out.join(ESTIMATES_FILE))?;
    let mut groups: BTreeMap<(String, String, usize, String), (Vec<EstimateResult>, usize)> = BTreeMap::new();
    for r in &records {
        let entry = groups.entry((r.scenario.clone(), r.dgp_id.clone(), r.n, r.estimator_id.clone())).or_default();
        match r.result() {
            Some(res) => entry.0.push(res),
            None => entry.1 += 1,
        }
    }
    let mut truths: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    for s in &plan.scenarios {
        for j in 0..plan.n_dgps {
            if let Some(d) = load_dgp(out, &s.name, j)? {
                truths.insert((s.name.clone(), dgp_id(j)), (d.truth.ate, d.truth.positivity_index));
            }
        }
    }
    let q: BTreeMap<String, f64> = plan.scenarios.iter().map(|s| (s.name.clone(), s.prior.q)).collect();
    let mut rows = Vec::new();
    for ((scenario, dgp, n, est), (results, failures)) in &groups {
        let Some(&(truth, index)) = truths.get(&(scenario.clone(), dgp.clone())) else {
            log::warn!("records for unknown dgp {scenario}/{dgp} ignored");
            continue;
        };
        let Some(m) = dgp_metrics(dgp, est, *n, results, *failures, truth) else {
            log::warn!("{scenario}/{dgp} n={n} {est}: every replicate failed");
            continue;
        };
        rows.push(MetricsRow {
            scenario: scenario.clone(),
            dgp_id: dgp.clone(),
            n: *n,
            estimator: est.clone(),
            bias: m.bias,
            coverage: m.coverage,
            mse: m.mse,
            n_reps: m.n_reps,
            n_failures: m.n_failures,
            truth,
            positivity_index: index,
            positivity: stratum_of(index, q.get(scenario).copied().unwrap_or(f64::INFINITY), &plan.positivity).label,
        });
    }
    let dir = out.join(SUMMARY_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = metrics_path(out);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &rows {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    let dgp_failures = plan.scenarios.iter().map(|s| (0..plan.n_dgps).filter(|&j| failure_path(out, &s.name, j).exists()).count()).sum();
    let meta = SummaryMetadata {
        master_seed: plan.master_seed,
        positivity: plan.positivity,
        scenarios: plan.scenarios.iter().map(|s| s.name.clone()).collect(),
        q,
        sample_sizes: plan.sample_sizes.clone(),
        estimators: plan.estimators.clone(),
        records: records.len(),
        failed_records: records.iter().filter(|r| r.error.is_some()).count(),
        dgp_failures,
    };
    let mpath = metadata_path(out);
    write_atomic(&mpath, &serde_json::to_vec_pretty(&meta).map_err(json_err(&mpath))?)?;
    Ok(rows)
}

pub fn read_metrics(out: &Path) -> Result<(Vec<MetricsRow>, SummaryMetadata), HarnessError> {
    let path = metrics_path(out);
    let mpath = metadata_path(out);
    if !path.exists() || !mpath.exists() {
        return Err(HarnessError::MissingSummaries(out.join(SUMMARY_DIR)));
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let rows = rdr.deserialize().collect::<Result<Vec<MetricsRow>, _>>().map_err(csv_err(&path))?;
    let meta = serde_json::from_slice(&fs::read(&mpath).map_err(io_err(&mpath))?).map_err(json_err(&mpath))?;
    Ok((rows, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub threshold: f64,
    pub exceedance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scenario: String,
    pub n: usize,
    pub estimator: String,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Reliability curves keyed by `(scenario, n)`, one per estimator, on a grid
/// shared by all estimators of the group.
pub fn curves(rows: &[MetricsRow], metric: CurveMetric) -> BTreeMap<(String, usize), Vec<ReliabilityCurve>> {
    let mut groups: BTreeMap<(String, usize), BTreeMap<String, Vec<DgpMetrics>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scenario.clone(), r.n)).or_default().entry(r.estimator.clone()).or_default().push(r.metrics());
    }
    groups
        .into_iter()
        .map(|(key, by_est)| {
            let all: Vec<f64> = by_est.values().flatten().map(|m| metric.of(m)).collect();
            let grid = default_thresholds(&all, THRESHOLD_GRID);
            let curves = by_est.values().map(|ms| reliability_curve(ms, metric, &grid)).collect();
            (key, curves)
        })
        .collect()
}

pub fn coverage_rows(rows: &[MetricsRow]) -> Vec<CoverageRow> {
    let mut groups: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scenario.clone(), r.n, r.estimator.clone())).or_default().push(r.coverage);
    }
    groups
        .into_iter()
        .filter_map(|((scenario, n, estimator), cov)| {
            coverage_summary(&cov).map(|s| CoverageRow { scenario, n, estimator, median: s.median, q25: s.q25, q75: s.q75 })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn curve_rows(curves: &BTreeMap<(String, usize), Vec<ReliabilityCurve>>) -> Vec<CurveRow> {
    let mut out = Vec::new();
    for ((scenario, n), cs) in curves {
        for c in cs {
            for (&t, &e) in c.thresholds.iter().zip(&c.exceedance) {
                out.push(CurveRow { scenario: scenario.clone(), estimator: c.estimator_id.clone(), n: *n, threshold: t, exceedance: e });
            }
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

/// Step plot of exceedance against threshold, one polyline per estimator.
pub fn render_svg(title: &str, curves: &[ReliabilityCurve]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let x_max = curves.iter().flat_map(|c| c.thresholds.last().copied()).fold(0.0f64, f64::max).max(1e-12);
    let sx = |t: f64| pad + (w - 2.0 * pad) * t / x_max;
    let sy = |e: f64| h - pad - (h - 2.0 * pad) * e;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{x_max:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">1</text>\n",
        xml_escape(title),
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w - pad,
        h - pad + 16.0,
        pad - 6.0,
        pad + 4.0,
    );
    for (i, c) in curves.iter().enumerate() {
        let mut pts = String::new();
        for (k, (&t, &e)) in c.thresholds.iter().zip(&c.exceedance).enumerate() {
            if k > 0 {
                // horizontal then vertical: right-continuous steps
                pts.push_str(&format!("{:.2},{:.2} ", sx(t), sy(c.exceedance[k - 1])));
            }
            pts.push_str(&format!("{:.2},{:.2} ", sx(t), sy(e)));
        }
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.trim_end()));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\" text-anchor=\"end\">{}</text>\n",
            w - pad,
            pad + 14.0 * (i as f64 + 1.0),
            xml_escape(&c.estimator_id)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes reliability curves, coverage tables, positivity-stratified variants
/// and SVG plots under `report/`. Returns the files written.
pub fn report(out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let (rows, _meta) = read_metrics(out)?;
    let dir = out.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    let mut emit = |suffix: &str, subset: &[MetricsRow]| -> Result<(), HarnessError> {
        for metric in [CurveMetric::Bias, CurveMetric::Mse] {
            let cs = curves(subset, metric);
            let path = dir.join(format!("reliability_{}{suffix}.csv", metric.name()));
            write_csv(&path, &curve_rows(&cs))?;
            written.push(path);
            for ((scenario, n), group) in &cs {
                let path = dir.join(format!("reliability_{}_{scenario}_n{n}{suffix}.svg", metric.name()));
                let title = format!("P(|{}| > b), {scenario}, n = {n}{}", metric.name(), suffix.replace('_', " "));
                fs::write(&path, render_svg(&title, group)).map_err(io_err(&path))?;
                written.push(path);
            }
        }
        let path = dir.join(format!("coverage_table{suffix}.csv"));
        write_csv(&path, &coverage_rows(subset))?;
        written.push(path);
        Ok(())
    };
    emit("", &rows)?;
    let labels: BTreeSet<PositivityLabel> = rows.iter().map(|r| r.positivity).collect();
    for label in labels {
        let subset: Vec<MetricsRow> = rows.iter().filter(|r| r.positivity == label).cloned().collect();
        emit(&format!("_{}", label.name()), &subset)?;
    }
    Ok(written)
}

/// All four stages in order.
pub fn run(plan: &RunPlan, out: &Path, workers: usize, resume: bool) -> Result<RunSummary, HarnessError> {
    let sampled = sample_dgps(plan, out, workers)?;
    let mut summary = simulate(plan, out, workers, resume)?;
    summary.dgp_failures = sampled.dgp_failures;
    summarize(plan, out)?;
    report(out)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_plan(out: &Path) -> RunPlan {
        let prior = PriorConfig { u: 1, h: 1, c: 4, k: 1, hte: true, q: 50.0, b: 0.0, eta: 1.0, rho: 1.0, tol: 0.01 };
        RunPlan {
            master_seed: 42,
            scenarios: vec![Scenario {
                name: "tiny".into(),
                prior,
                b_range: Some([-0.05, 0.05]),
                eta_range: Some([0.5, 2.0]),
                rho_range: None,
            }],
            n_dgps: 2,
            n_reps: 2,
            sample_sizes: vec![60],
            estimators: vec!["gcomp".into(), "iptw_cbps".into(), "tmle".into()],
            output_dir: out.to_path_buf(),
            positivity: PositivityThresholds::default(),
            estimator_settings: EstimatorSettings::default(),
            max_iterations: 1000,
        }
    }

    #[test]
    fn plan_roundtrips_and_validates() {
        let plan = tiny_plan(Path::new("out"));
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains("\"master_seed\":\"42\""));
        assert_eq!(serde_json::from_str::<RunPlan>(&text).unwrap(), plan);
        let mut bad = plan.clone();
        bad.estimators.push("bart".into());
        assert!(matches!(bad.validate(), Err(HarnessError::Config(_))));
        let mut bad = plan.clone();
        bad.n_reps = 0;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let mut bad = plan;
        bad.scenarios[0].b_range = Some([0.2, -0.2]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hyperdraws_stay_in_range_and_ignore_estimators() {
        let plan = tiny_plan(Path::new("out"));
        let s = &plan.scenarios[0];
        let a = draw_prior(&plan, s, 3);
        assert!((-0.05..0.05).contains(&a.b) && (0.5..2.0).contains(&a.eta) && a.rho == 1.0);
        let mut other = plan.clone();
        other.estimators = vec!["cvtmle".into()];
        assert_eq!(draw_prior(&other, &other.scenarios[0], 3), a);
        assert_ne!(draw_prior(&plan, s, 4), a);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ESTIMATES_FILE);
        let rec = EstimateRecord::from_result("s", "dgp0000", 0, 10, "gcomp", 0.1, Err("boom".into()));
        let line = serde_json::to_string(&rec).unwrap();
        fs::write(&path, format!("{line}\n{}", &line[..line.len() / 2])).unwrap();
        let recs = read_records(&path).unwrap();
        assert_eq!(recs, vec![rec]);
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{line}\n"));
    }

    #[test]
    fn record_keys_are_in_fixed_order() {
        let mut diag = BTreeMap::new();
        diag.insert("b".to_string(), 1.0);
        diag.insert("a".to_string(), f64::NAN);
        let rec = EstimateRecord::from_result("s", "d", 1, 10, "tmle", 0.5, Ok(EstimateResult::new("tmle", 0.1, 0.02, diag)));
        let text = serde_json::to_string(&rec).unwrap();
        let keys = ["scenario", "dgp_id", "rep", "n", "estimator_id", "point", "se", "ci_low", "ci_high", "wall_seconds", "diagnostics"];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(!text.contains("\"a\""));
        assert!(!text.contains("error"));
    }

    #[test]
    fn svg_steps_never_rise() {
        let c = ReliabilityCurve {
            estimator_id: "x".into(),
            n: 10,
            metric: CurveMetric::Bias,
            thresholds: vec![0.0, 0.1, 0.2],
            exceedance: vec![1.0, 0.5, 0.0],
        };
        let svg = render_svg("t", &[c]);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: Vec<f64> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap().parse().unwrap()).collect();
        // svg y grows downward
        assert!(ys.windows(2).all(|w| w[1] >= w[0]));
    }
}
