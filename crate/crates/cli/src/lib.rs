//! Command implementations behind the `robust-sur` binary.
//!
//! Every command writes its tables into an output directory and finishes by
//! writing `manifest.json`, so a directory with a manifest is complete.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{SecondsFormat, Utc};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use robust_sur::dataset::{self, DataTable, ModelSpec};
use robust_sur::metrics::{self, MetricRecord};
use robust_sur::simulation::{self, CellSummary, SimScenario};
use robust_sur::{estimators, Method, SurError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cells with weight below this are reported as flagged.
pub const FLAG_THRESHOLD: f64 = 0.5;

/// A failed command: message plus process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// 2 for input and configuration problems, 3 for numerical failures.
pub fn exit_code(e: &SurError) -> i32 {
    match e {
        SurError::InvalidInput(_)
        | SurError::Spec(_)
        | SurError::Io(_)
        | SurError::Csv(_)
        | SurError::Json(_)
        | SurError::DimensionMismatch { .. }
        | SurError::Unsupported(_) => 2,
        _ => 3,
    }
}

impl From<SurError> for CliError {
    fn from(e: SurError) -> Self {
        CliError { code: exit_code(&e), message: e.to_string() }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::user(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_sha256: Option<String>,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub details: serde_json::Map<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Collects output files and writes the manifest after them.
struct OutDir {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl OutDir {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        // a stale manifest would claim a complete run while we overwrite it
        let stale = dir.join("manifest.json");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
        }
        Ok(OutDir { dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn matrix(&mut self, name: &str, labels: &[String], m: &DMatrix<f64>) -> CliResult<()> {
        let header: Vec<&str> = labels.iter().map(String::as_str).collect();
        self.csv(name, &header, m.row_iter().map(|r| r.iter().map(|v| num(*v)).collect()))
    }

    fn finish(self, mut manifest: RunManifest) -> CliResult<PathBuf> {
        manifest.outputs = self.outputs;
        manifest.finished_at = now();
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::user(e.to_string()))?;
        fs::write(&tmp, text + "\n").map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), num)
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub data: PathBuf,
    pub model: PathBuf,
    pub method: Method,
    pub out: PathBuf,
    pub seed: u64,
    /// Inference was explicitly requested; an error for fastSUR.
    pub inference: bool,
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<PathBuf> {
    let started_at = now();
    if args.inference && args.method == Method::FastSur {
        return Err(CliError::user("inference unsupported for fastsur"));
    }
    let model_bytes = read_bytes(&args.model)?;
    let data_bytes = read_bytes(&args.data)?;
    let spec = parse_model(&args.model, &model_bytes)?;
    let table = DataTable::read(data_bytes.as_slice(), &spec.columns())?;
    let system = dataset::build_system(&spec, &table)?;
    let fit = estimators::fit(&system, args.method, args.seed)?;

    let mut out = OutDir::create(&args.out)?;
    let labels: Vec<String> = (0..system.m()).map(|i| metrics::equation_label(&system, i)).collect();
    let mut coef_rows = Vec::new();
    for i in 0..system.m() {
        let eq = system.equation(i);
        for j in 0..eq.p() {
            coef_rows.push(vec![labels[i].clone(), eq.coefficient_name(j), num(fit.beta[system.offset(i) + j])]);
        }
    }
    out.csv("coefficients.csv", &["equation", "coefficient", "estimate"], coef_rows)?;
    out.matrix("sigma1.csv", &labels, &fit.sigma1)?;
    out.matrix("sigma2.csv", &labels, &fit.sigma2)?;
    out.matrix("weights.csv", &labels, &fit.cell_weights)?;
    let flags = metrics::flag_cells(&fit, FLAG_THRESHOLD);
    out.matrix("flags.csv", &labels, &flags.mask.map(|f| if f { 1.0 } else { 0.0 }))?;

    let mut details = serde_json::Map::new();
    details.insert("method".into(), args.method.name().into());
    details.insert("flag_threshold".into(), FLAG_THRESHOLD.into());
    details.insert("flagged_cell_fraction".into(), flags.cell_fraction.into());
    details.insert("flagged_row_fraction".into(), flags.row_fraction.into());
    details.insert("warnings".into(), fit.diagnostics.warnings.clone().into());

    if args.method != Method::FastSur {
        let inf = metrics::system_inference(&fit, &system)?;
        out.csv(
            "inference.csv",
            &["equation", "coefficient", "estimate", "std_error", "z", "p_value"],
            inf.coefficients.iter().map(|c| {
                vec![c.equation.clone(), c.coefficient.clone(), num(c.estimate), num(c.std_error), num(c.z), num(c.p_value)]
            }),
        )?;
        let mut rows: Vec<Vec<String>> = inf
            .equations
            .iter()
            .map(|e| vec![e.equation.clone(), num(e.r_squared), num(e.adj_r_squared)])
            .collect();
        rows.push(vec!["system (McElroy)".into(), num(inf.system_r_squared), "NA".into()]);
        out.csv("r_squared.csv", &["equation", "r_squared", "adj_r_squared"], rows)?;
    }

    out.finish(RunManifest {
        command: "fit".into(),
        config: args.model.display().to_string(),
        config_sha256: sha256_hex(&model_bytes),
        data: Some(args.data.display().to_string()),
        data_sha256: Some(sha256_hex(&data_bytes)),
        seed: args.seed,
        version: VERSION.into(),
        started_at,
        finished_at: String::new(),
        outputs: Vec::new(),
        details,
    })
}

fn parse_model(path: &Path, bytes: &[u8]) -> CliResult<ModelSpec> {
    let text = std::str::from_utf8(bytes).map_err(|e| io_err(path, e))?;
    let spec = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => ModelSpec::from_toml(text)?,
        _ => ModelSpec::from_json(text)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_scenario(path: &Path, bytes: &[u8]) -> CliResult<SimScenario> {
    let text = std::str::from_utf8(bytes).map_err(|e| io_err(path, e))?;
    let sc = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => SimScenario::from_json(text)?,
        _ => SimScenario::from_toml(text)?,
    };
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    /// Overrides the scenario's master seed.
    pub seed: Option<u64>,
    pub quiet: bool,
}

/// Runs every replication of `scenario` on `threads` workers. Records come
/// back in replication order whatever the thread count.
pub fn run_scenario(scenario: &SimScenario, threads: Option<usize>, quiet: bool) -> CliResult<Vec<MetricRecord>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::user("--threads must be positive"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CliError::user(e.to_string()))?;
    let done = AtomicUsize::new(0);
    let per_rep: Vec<robust_sur::Result<Vec<MetricRecord>>> = pool.install(|| {
        (0..scenario.reps)
            .into_par_iter()
            .map(|r| {
                let out = simulation::run_replication(scenario, r);
                let d = done.fetch_add(1, Ordering::Relaxed) + 1;
                if !quiet {
                    eprintln!("replication {d}/{}", scenario.reps);
                }
                out
            })
            .collect()
    });
    let mut records = Vec::new();
    for rep in per_rep {
        records.extend(rep?);
    }
    Ok(records)
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<PathBuf> {
    let started_at = now();
    let bytes = read_bytes(&args.config)?;
    let mut scenario = parse_scenario(&args.config, &bytes)?;
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    let records = run_scenario(&scenario, args.threads, args.quiet)?;
    let summary = simulation::summarise(&records);
    let failures = records.iter().filter(|r| r.error.is_some()).count();

    let mut out = OutDir::create(&args.out)?;
    write_results(&mut out, &records)?;
    write_summary(&mut out, &summary)?;
    if failures > 0 {
        eprintln!("{failures} of {} fits failed; see the error column of results.csv", records.len());
    }
    let mut details = serde_json::Map::new();
    details.insert("scenario".into(), scenario.name.clone().into());
    details.insert("replications".into(), scenario.reps.into());
    details.insert("fits".into(), records.len().into());
    details.insert("failed_fits".into(), failures.into());
    out.finish(RunManifest {
        command: "simulate".into(),
        config: args.config.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        data: None,
        data_sha256: None,
        seed: scenario.seed,
        version: VERSION.into(),
        started_at,
        finished_at: String::new(),
        outputs: Vec::new(),
        details,
    })
}

fn key(scenario: &str, method: Method, epsilon: f64, k: f64) -> Vec<String> {
    vec![scenario.to_string(), method.name().to_string(), num(epsilon), num(k)]
}

fn write_results(out: &mut OutDir, records: &[MetricRecord]) -> CliResult<()> {
    out.csv(
        "results.csv",
        &["scenario", "method", "epsilon", "k", "rep", "mse_contrib", "delta1", "delta2", "error"],
        records.iter().map(|r| {
            let mut row = key(&r.scenario, r.method, r.epsilon, r.k);
            row.extend([
                r.rep.to_string(),
                opt(r.mse_contrib),
                opt(r.delta1),
                opt(r.delta2),
                r.error.clone().unwrap_or_default(),
            ]);
            row
        }),
    )?;
    out.csv(
        "timings.csv",
        &["scenario", "method", "epsilon", "k", "rep", "seconds"],
        records.iter().map(|r| {
            let mut row = key(&r.scenario, r.method, r.epsilon, r.k);
            row.extend([r.rep.to_string(), num(r.seconds)]);
            row
        }),
    )
}

fn write_summary(out: &mut OutDir, summary: &[CellSummary]) -> CliResult<()> {
    out.csv(
        "summary.csv",
        &["scenario", "method", "epsilon", "k", "mse", "delta1", "delta2", "n_ok", "n_failed"],
        summary.iter().map(|s| {
            let mut row = key(&s.scenario, s.method, s.epsilon, s.k);
            row.extend([num(s.mse), num(s.delta1), num(s.delta2), s.n_ok.to_string(), s.n_failed.to_string()]);
            row
        }),
    )?;
    out.csv(
        "timing_summary.csv",
        &["scenario", "method", "epsilon", "k", "mean_seconds", "median_seconds", "n_ok"],
        summary.iter().map(|s| {
            let mut row = key(&s.scenario, s.method, s.epsilon, s.k);
            row.extend([num(s.mean_seconds), num(s.median_seconds), s.n_ok.to_string()]);
            row
        }),
    )
}

/// One row of the timing table: a method at one contamination level, pooled
/// over outlier magnitudes and replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scenario: String,
    pub contamination: String,
    pub epsilon: f64,
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub runs: usize,
    pub failed: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
}

pub fn bench_rows(scenario: &SimScenario, records: &[MetricRecord]) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &eps in &scenario.epsilon_grid() {
        for &method in &scenario.methods {
            let cell: Vec<&MetricRecord> = records.iter().filter(|r| r.method == method && r.epsilon == eps).collect();
            let mut secs: Vec<f64> = cell.iter().filter(|r| r.error.is_none()).map(|r| r.seconds).collect();
            secs.sort_by(f64::total_cmp);
            let (mean, median) = if secs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let h = secs.len() / 2;
                let median = if secs.len() % 2 == 1 { secs[h] } else { 0.5 * (secs[h - 1] + secs[h]) };
                (secs.iter().sum::<f64>() / secs.len() as f64, median)
            };
            rows.push(BenchRow {
                scenario: scenario.name.clone(),
                contamination: scenario.contamination.name().to_string(),
                epsilon: eps,
                method,
                n: scenario.n,
                p: scenario.p,
                m: scenario.m,
                runs: secs.len(),
                failed: cell.len() - secs.len(),
                mean_seconds: mean,
                median_seconds: median,
            });
        }
    }
    rows
}

/// Contamination levels down, methods across, mean seconds in the cells.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut levels: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !levels.iter().any(|(c, e)| *c == r.contamination && *e == r.epsilon) {
            levels.push((r.contamination.clone(), r.epsilon));
        }
    }
    let mut s = format!("{:<12} {:>8}", "model", "epsilon");
    for m in &methods {
        s += &format!(" {:>12}", m.name());
    }
    s.push('\n');
    for (c, e) in &levels {
        s += &format!("{c:<12} {e:>8}");
        for m in &methods {
            let v = rows
                .iter()
                .find(|r| r.method == *m && r.contamination == *c && r.epsilon == *e)
                .map_or(f64::NAN, |r| r.mean_seconds);
            s += &format!(" {v:>12.4}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

/// Times every method sequentially, so fits never compete for cores.
pub fn cmd_bench(args: &BenchArgs) -> CliResult<(Vec<BenchRow>, Option<PathBuf>)> {
    let started_at = now();
    let bytes = read_bytes(&args.config)?;
    let mut scenario = parse_scenario(&args.config, &bytes)?;
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    let records = run_scenario(&scenario, Some(1), args.quiet)?;
    let rows = bench_rows(&scenario, &records);
    let Some(dir) = &args.out else {
        return Ok((rows, None));
    };
    let mut out = OutDir::create(dir)?;
    out.csv(
        "bench.csv",
        &["scenario", "contamination", "epsilon", "method", "n", "p", "m", "runs", "failed", "mean_seconds", "median_seconds"],
        rows.iter().map(|r| {
            vec![
                r.scenario.clone(),
                r.contamination.clone(),
                num(r.epsilon),
                r.method.name().to_string(),
                r.n.to_string(),
                r.p.to_string(),
                r.m.to_string(),
                r.runs.to_string(),
                r.failed.to_string(),
                num(r.mean_seconds),
                num(r.median_seconds),
            ]
        }),
    )?;
    let manifest = out.finish(RunManifest {
        command: "bench".into(),
        config: args.config.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        data: None,
        data_sha256: None,
        seed: scenario.seed,
        version: VERSION.into(),
        started_at,
        finished_at: String::new(),
        outputs: Vec::new(),
        details: serde_json::Map::new(),
    })?;
    Ok((rows, Some(manifest)))
}
