//! Monte Carlo designs: random correlation matrices with a fixed condition
//! number, Cauchy coefficients, Gaussian errors and row-wise (THCM) or
//! cell-wise (ICM) contamination.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Cauchy, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurError};
use crate::estimators::{self, FastSurConfig, Method, SurerobConfig};
use crate::linalg;
use crate::metrics::{self, MetricRecord};
use crate::model::{Equation, SurSystem};
use crate::seeds;

/// Coefficient draws are clamped to this magnitude.
pub const BETA_CLAMP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Contamination {
    #[default]
    None,
    Thcm,
    Icm,
}

impl Contamination {
    pub fn name(&self) -> &'static str {
        match self {
            Contamination::None => "none",
            Contamination::Thcm => "thcm",
            Contamination::Icm => "icm",
        }
    }
}

/// Distribution of the design entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DesignLaw {
    #[default]
    Normal,
    /// Uniform on `(-sqrt 3, sqrt 3)`, unit variance.
    Uniform,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_cn() -> f64 {
    100.0
}
fn default_eps() -> Vec<f64> {
    vec![0.0]
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    #[serde(default)]
    pub contamination: Contamination,
    #[serde(default = "default_eps")]
    pub epsilon_list: Vec<f64>,
    /// Defaults to the grid of the contamination model.
    #[serde(default)]
    pub k_list: Option<Vec<f64>>,
    #[serde(default = "default_cn")]
    pub cn: f64,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub design: DesignLaw,
    /// Number of fastSUR subsampling candidates.
    #[serde(default)]
    pub fast_candidates: Option<usize>,
}

impl SimScenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SimScenario = toml::from_str(text).map_err(|e| SurError::Spec(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SimScenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a `.json` or `.toml` scenario file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SurError::Spec(msg));
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if self.p == 0 || self.n <= self.m + self.p {
            return bad(format!("need p >= 1 and n > m + p (n = {}, m = {}, p = {})", self.n, self.m, self.p));
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if !(self.cn > 1.0) || !self.cn.is_finite() {
            return bad(format!("cn must be finite and > 1, got {}", self.cn));
        }
        if let Some(e) = self.epsilon_list.iter().find(|e| !(0.0..0.5).contains(*e)) {
            return bad(format!("epsilon {e} outside [0, 0.5)"));
        }
        if self.epsilon_list.is_empty() {
            return bad("epsilon_list is empty".into());
        }
        if let Some(k) = self.k_grid().iter().find(|k| !(**k >= 0.0) || !k.is_finite()) {
            return bad(format!("k {k} must be finite and >= 0"));
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.fast_candidates == Some(0) {
            return bad("fast_candidates must be positive".into());
        }
        Ok(())
    }

    /// Outlier magnitudes to evaluate; a single `k = 0` without contamination.
    pub fn k_grid(&self) -> Vec<f64> {
        if self.contamination == Contamination::None {
            return vec![0.0];
        }
        match &self.k_list {
            Some(k) => k.clone(),
            None => match self.contamination {
                Contamination::Icm => icm_k_grid(),
                _ => thcm_k_grid(),
            },
        }
    }

    pub fn epsilon_grid(&self) -> Vec<f64> {
        if self.contamination == Contamination::None {
            vec![0.0]
        } else {
            self.epsilon_list.clone()
        }
    }
}

/// `0, 5, ..., 100`.
pub fn thcm_k_grid() -> Vec<f64> {
    (0..=20).map(|i| 5.0 * i as f64).collect()
}

/// `1, 5, 10, ..., 100`.
pub fn icm_k_grid() -> Vec<f64> {
    std::iter::once(1.0).chain((1..=20).map(|i| 5.0 * i as f64)).collect()
}

/// Number of units out of `total` hit by contamination fraction `eps`.
pub fn contaminated_count(eps: f64, total: usize) -> usize {
    ((eps * total as f64) + 1e-9).floor() as usize
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = linalg::sorted_eigen(a).0;
    ev[ev.len() - 1] / ev[0]
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal<R: Rng>(m: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random correlation matrix whose condition number is `cn` within 1%.
///
/// Starts from `Q diag(lambda) Q'` with log-linear eigenvalues in `[1/cn, 1]`
/// and alternates unit-diagonal rescaling with a log-space stretch of the
/// spectrum back to ratio `cn`.
pub fn random_correlation<R: Rng>(m: usize, cn: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if m < 2 || !(cn > 1.0) {
        return Err(SurError::InvalidInput(format!(
            "random correlation needs m >= 2 and cn > 1 (m = {m}, cn = {cn})"
        )));
    }
    let q = random_orthogonal(m, rng);
    let lambda = DVector::from_fn(m, |i, _| cn.powf(-(i as f64) / (m - 1) as f64));
    let mut s = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    let mut achieved = f64::NAN;
    for _ in 0..50 {
        let d = s.diagonal().map(|v| 1.0 / v.sqrt());
        let mut c = linalg::symmetrize(&DMatrix::from_fn(m, m, |i, j| s[(i, j)] * d[i] * d[j]));
        c.fill_diagonal(1.0);
        achieved = condition_number(&c);
        if (achieved / cn - 1.0).abs() <= 0.01 * 0.5 && linalg::min_eigenvalue(&c) > 0.0 {
            return Ok(c);
        }
        let (ev, vecs) = linalg::sorted_eigen(&c);
        let (lo, hi) = (ev[0].max(f64::MIN_POSITIVE).ln(), ev[m - 1].ln());
        let stretch = if hi > lo { cn.ln() / (hi - lo) } else { 1.0 };
        let new_ev = ev.map(|v| (hi + (v.max(f64::MIN_POSITIVE).ln() - hi) * stretch).exp());
        s = linalg::symmetrize(&(&vecs * DMatrix::from_diagonal(&new_ev) * vecs.transpose()));
    }
    Err(SurError::CorrelationFailed {
        sweeps: 50,
        achieved_cn: achieved,
    })
}

/// One simulated SUR system together with its generating quantities.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub designs: Vec<DMatrix<f64>>,
    pub beta: DVector<f64>,
    pub errors: DMatrix<f64>,
    pub system: SurSystem,
    /// Coefficient draws that hit the clamp.
    pub clamped: usize,
}

impl SimDraw {
    /// The same design and coefficients with responses rebuilt from `errors`.
    pub fn with_errors(&self, errors: &DMatrix<f64>) -> Result<SurSystem> {
        let fitted = self.system.fitted(&self.beta)?;
        self.system.with_responses(&(fitted + errors))
    }
}

pub fn draw_system<R: Rng>(scenario: &SimScenario, sigma: &DMatrix<f64>, rng: &mut R) -> Result<SimDraw> {
    let (n, p, m) = (scenario.n, scenario.p, scenario.m);
    let cauchy = Cauchy::new(0.0, 1.0).expect("valid Cauchy parameters");
    let mut clamped = 0;
    let beta = DVector::from_fn(m * p, |_, _| {
        let b: f64 = rng.sample(cauchy);
        if b.abs() > BETA_CLAMP {
            clamped += 1;
            b.signum() * BETA_CLAMP
        } else {
            b
        }
    });
    let root3 = 3f64.sqrt();
    let designs: Vec<DMatrix<f64>> = (0..m)
        .map(|_| {
            DMatrix::from_fn(n, p, |_, _| match scenario.design {
                DesignLaw::Normal => rng.sample(StandardNormal),
                DesignLaw::Uniform => rng.random_range(-root3..root3),
            })
        })
        .collect();
    let chol = linalg::cholesky(sigma)?;
    let z = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let errors = z * chol.l().transpose();
    let equations = designs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let b = beta.rows(i * p, p);
            Equation::new(x * b + errors.column(i), x.clone())
        })
        .collect();
    Ok(SimDraw {
        system: SurSystem::new(equations)?,
        designs,
        beta,
        errors,
        clamped,
    })
}

/// Eigenvector of the smallest eigenvalue of `sigma`, scaled so that
/// `v' Sigma^-1 v = 1`, with its first nonzero entry positive.
pub fn thcm_direction(sigma: &DMatrix<f64>) -> DVector<f64> {
    let (ev, vecs) = linalg::sorted_eigen(sigma);
    let mut v = vecs.column(0).into_owned() * ev[0].max(0.0).sqrt();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

/// Replaces `floor(eps n)` random rows by `k v`. Returns the new matrix and
/// the sorted contaminated rows.
pub fn contaminate_thcm<R: Rng>(
    errors: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    eps: f64,
    k: f64,
    rng: &mut R,
) -> (DMatrix<f64>, Vec<usize>) {
    let n = errors.nrows();
    let count = contaminated_count(eps, n);
    let mut out = errors.clone();
    if count == 0 {
        return (out, Vec::new());
    }
    let v = thcm_direction(sigma) * k;
    let mut rows = index::sample(rng, n, count).into_vec();
    rows.sort_unstable();
    for &r in &rows {
        out.row_mut(r).copy_from(&v.transpose());
    }
    (out, rows)
}

/// Replaces `floor(eps n m)` random cells by `k`. Returns the new matrix and
/// the sorted contaminated `(row, column)` positions.
pub fn contaminate_icm<R: Rng>(errors: &DMatrix<f64>, eps: f64, k: f64, rng: &mut R) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let (n, m) = errors.shape();
    let count = contaminated_count(eps, n * m);
    let mut out = errors.clone();
    let mut cells: Vec<(usize, usize)> = index::sample(rng, n * m, count)
        .into_iter()
        .map(|idx| (idx % n, idx / n))
        .collect();
    cells.sort_unstable();
    for &(r, c) in &cells {
        out[(r, c)] = k;
    }
    (out, cells)
}

/// Seed streams of one replication.
mod stream {
    pub const CORRELATION: u64 = 0;
    pub const DATA: u64 = 1;
    pub const CONTAMINATION: u64 = 2;
    pub const ESTIMATOR: u64 = 3;
}

/// Runs every (epsilon, k, method) cell of replication `rep`. Contamination
/// positions depend on (rep, epsilon) only, so the k-curves of one
/// replication share their outlying rows or cells.
pub fn run_replication(scenario: &SimScenario, rep: usize) -> Result<Vec<MetricRecord>> {
    let seed = scenario.seed;
    let r = rep as u64;
    let sigma = random_correlation(scenario.m, scenario.cn, &mut seeds::rng_for(seed, &[stream::CORRELATION, r]))?;
    let draw = draw_system(scenario, &sigma, &mut seeds::rng_for(seed, &[stream::DATA, r]))?;
    let mut records = Vec::new();
    for (ei, &eps) in scenario.epsilon_grid().iter().enumerate() {
        for (ki, &k) in scenario.k_grid().iter().enumerate() {
            let mut rng = seeds::rng_for(seed, &[stream::CONTAMINATION, r, ei as u64]);
            let errors = match scenario.contamination {
                Contamination::None => draw.errors.clone(),
                Contamination::Thcm => contaminate_thcm(&draw.errors, &sigma, eps, k, &mut rng).0,
                Contamination::Icm => contaminate_icm(&draw.errors, eps, k, &mut rng).0,
            };
            let system = draw.with_errors(&errors)?;
            let est_seed = seeds::derive_seed(seed, &[stream::ESTIMATOR, r, ei as u64, ki as u64]);
            for &method in &scenario.methods {
                records.push(evaluate(scenario, &system, &draw.beta, &sigma, method, est_seed, eps, k, rep));
            }
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    scenario: &SimScenario,
    system: &SurSystem,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    method: Method,
    seed: u64,
    epsilon: f64,
    k: f64,
    rep: usize,
) -> MetricRecord {
    let start = Instant::now();
    let fit = match method {
        Method::Sure => estimators::fit_sure(system),
        Method::Surerob => estimators::fit_surerob(system, &SurerobConfig { seed, ..Default::default() }),
        Method::FastSur => {
            let mut cfg = FastSurConfig { seed, ..Default::default() };
            if let Some(c) = scenario.fast_candidates {
                cfg.n_cand = c;
            }
            estimators::fit_fast_sur(system, &cfg)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let scored = fit.and_then(|f| {
        Ok((
            (&f.beta - beta).norm_squared(),
            metrics::kl_divergence(&f.sigma1, sigma)?,
            metrics::kl_divergence(&f.sigma2, sigma)?,
        ))
    });
    let mut rec = MetricRecord {
        scenario: scenario.name.clone(),
        method,
        epsilon,
        k,
        rep,
        mse_contrib: None,
        delta1: None,
        delta2: None,
        seconds,
        error: None,
    };
    match scored {
        Ok((mse, d1, d2)) => {
            rec.mse_contrib = Some(mse);
            rec.delta1 = Some(d1);
            rec.delta2 = Some(d2);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Per (method, epsilon, k) averages over successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: String,
    pub method: Method,
    pub epsilon: f64,
    pub k: f64,
    pub mse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Summarises records cell by cell, in order of first appearance.
pub fn summarise(records: &[MetricRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, Method, f64, f64)> = Vec::new();
    for r in records {
        let key = (r.scenario.clone(), r.method, r.epsilon, r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(scenario, method, epsilon, k)| {
            let cell: Vec<&MetricRecord> = records
                .iter()
                .filter(|r| r.scenario == scenario && r.method == method && r.epsilon == epsilon && r.k == k)
                .collect();
            let ok: Vec<&&MetricRecord> = cell.iter().filter(|r| r.mse_contrib.is_some()).collect();
            let mean = |f: &dyn Fn(&MetricRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let times: Vec<f64> = ok.iter().map(|r| r.seconds).collect();
            CellSummary {
                mse: mean(&|r| r.mse_contrib.unwrap_or(f64::NAN)),
                delta1: mean(&|r| r.delta1.unwrap_or(f64::NAN)),
                delta2: mean(&|r| r.delta2.unwrap_or(f64::NAN)),
                mean_seconds: mean(&|r| r.seconds),
                median_seconds: if times.is_empty() { f64::NAN } else { linalg::median(&times) },
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                scenario,
                method,
                epsilon,
                k,
            }
        })
        .collect()
}
