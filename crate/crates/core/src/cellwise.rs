//! Cell-wise robust covariance of a residual matrix.
//!
//! A univariate filter flags outlying cells column by column; the flagged
//! cells are then treated as missing by a generalized S-estimator of
//! location and scatter that works on partially observed rows.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::erf;

use crate::error::{Result, SurError};
use crate::linalg;
use crate::loss::{self, LossFamily};
use crate::model::ResidualMatrix;

/// `Phi^-1(0.975)`, the 95% quantile of the half-normal law.
const FILTER_ETA: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// `true` marks a flagged cell.
    pub mask: DMatrix<bool>,
    /// Flagged cells in each column divided by the row count.
    pub per_column_fraction: Vec<f64>,
    /// Smallest flagged `|z|` per column, `inf` when nothing is flagged.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsEstimate {
    pub location: DVector<f64>,
    pub scatter: DMatrix<f64>,
    /// Generalized S-scale of the returned scatter (1 up to root tolerance).
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepGs {
    pub estimate: GsEstimate,
    pub filter: FilterResult,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GsConfig {
    fn default() -> Self {
        GsConfig {
            max_iter: 200,
            tol: 1e-7,
        }
    }
}

fn half_normal_cdf(t: f64) -> f64 {
    erf(t / std::f64::consts::SQRT_2)
}

/// Gervini-Yohai type univariate filter.
///
/// Cells already masked in `resid` stay masked and are ignored when the
/// column is standardised. No row keeps more than `ceil(0.75 m)` flags; the
/// least extreme flags of a row over the cap are rescinded.
pub fn univariate_filter(resid: &ResidualMatrix) -> Result<FilterResult> {
    let (n, m) = (resid.nrows(), resid.ncols());
    let mut mask = resid.mask.clone();
    let mut absz = DMatrix::<f64>::zeros(n, m);
    for j in 0..m {
        let rows: Vec<usize> = (0..n).filter(|&k| !resid.mask[(k, j)]).collect();
        let vals: Vec<f64> = rows.iter().map(|&k| resid.values[(k, j)]).collect();
        if vals.len() < 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(SurError::InvalidInput(format!(
                "column {j} needs at least 3 finite observed values"
            )));
        }
        let med = linalg::median(&vals);
        let s = linalg::madn(&vals);
        if !(s > 0.0) {
            return Err(SurError::ZeroScale { column: j });
        }
        let mut order: Vec<(f64, usize)> = rows
            .iter()
            .zip(&vals)
            .map(|(&k, v)| ((v - med).abs() / s, k))
            .collect();
        for &(a, k) in &order {
            absz[(k, j)] = a;
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nj = order.len() as f64;
        let d = order
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| *a >= FILTER_ETA)
            .map(|(i, (a, _))| half_normal_cdf(*a) - i as f64 / nj)
            .fold(0.0_f64, f64::max);
        let n_flag = ((nj * d) - 1e-9).ceil().max(0.0) as usize;
        for &(_, k) in order.iter().rev().take(n_flag) {
            mask[(k, j)] = true;
        }
    }

    let cap = (0.75 * m as f64).ceil() as usize;
    for k in 0..n {
        let mut flagged: Vec<usize> = (0..m).filter(|&j| mask[(k, j)] && !resid.mask[(k, j)]).collect();
        let pre = (0..m).filter(|&j| resid.mask[(k, j)]).count();
        if flagged.len() + pre > cap {
            flagged.sort_by(|&a, &b| absz[(k, a)].total_cmp(&absz[(k, b)]));
            let excess = (flagged.len() + pre - cap).min(flagged.len());
            for &j in flagged.iter().take(excess) {
                mask[(k, j)] = false;
            }
        }
    }

    let mut per_column_fraction = Vec::with_capacity(m);
    let mut thresholds = Vec::with_capacity(m);
    for j in 0..m {
        let flagged: Vec<usize> = (0..n).filter(|&k| mask[(k, j)]).collect();
        if flagged.len() == n {
            return Err(SurError::Degenerate {
                reason: format!("every cell of column {j} was flagged"),
                location: None,
            });
        }
        per_column_fraction.push(flagged.len() as f64 / n as f64);
        thresholds.push(
            flagged
                .iter()
                .filter(|&&k| !resid.mask[(k, j)])
                .map(|&k| absz[(k, j)])
                .fold(f64::INFINITY, f64::min),
        );
    }
    Ok(FilterResult {
        mask,
        per_column_fraction,
        thresholds,
    })
}

/// Conditional-Gaussian quantities for one observed/missing pattern.
struct Pattern {
    obs: Vec<usize>,
    mis: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
    /// `Sigma_mo Sigma_oo^-1`
    reg: DMatrix<f64>,
    /// `Sigma_mm - Sigma_mo Sigma_oo^-1 Sigma_om`
    cond: DMatrix<f64>,
}

struct Patterns {
    /// pattern index per row
    row_pattern: Vec<usize>,
    keys: Vec<Vec<bool>>,
}

impl Patterns {
    fn new(mask: &DMatrix<bool>) -> Self {
        let mut map: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let row_pattern = (0..mask.nrows())
            .map(|k| {
                let key: Vec<bool> = (0..mask.ncols()).map(|j| !mask[(k, j)]).collect();
                *map.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    keys.len() - 1
                })
            })
            .collect();
        Patterns { row_pattern, keys }
    }

    fn factor(&self, sigma: &DMatrix<f64>) -> Result<Vec<Pattern>> {
        self.keys
            .iter()
            .map(|key| {
                let obs: Vec<usize> = (0..key.len()).filter(|&j| key[j]).collect();
                let mis: Vec<usize> = (0..key.len()).filter(|&j| !key[j]).collect();
                let s_oo = sigma.select_rows(obs.iter()).select_columns(obs.iter());
                let chol = linalg::cholesky(&s_oo)?;
                let s_mo = sigma.select_rows(mis.iter()).select_columns(obs.iter());
                let s_mm = sigma.select_rows(mis.iter()).select_columns(mis.iter());
                let reg = chol.solve(&s_mo.transpose()).transpose();
                let cond = &s_mm - &reg * s_mo.transpose();
                Ok(Pattern {
                    obs,
                    mis,
                    chol,
                    reg,
                    cond,
                })
            })
            .collect()
    }
}

struct Workspace<'a> {
    data: &'a DMatrix<f64>,
    patterns: Patterns,
    /// distance inflation for the observed-cell count of each row
    inflation: Vec<f64>,
    family: LossFamily,
}

impl Workspace<'_> {
    fn distances(&self, mu: &DVector<f64>, factors: &[Pattern]) -> Vec<f64> {
        (0..self.data.nrows())
            .map(|k| {
                let pat = &factors[self.patterns.row_pattern[k]];
                let diff = DVector::from_iterator(pat.obs.len(), pat.obs.iter().map(|&j| self.data[(k, j)] - mu[j]));
                let sol = pat.chol.solve(&diff);
                diff.dot(&sol).max(0.0).sqrt()
            })
            .collect()
    }

    /// Generalized S-scale of the partial distances.
    fn scale(&self, d: &[f64]) -> f64 {
        let n = d.len() as f64;
        let fam = &self.family;
        let avg = |s: f64| {
            d.iter()
                .zip(&self.inflation)
                .map(|(dk, k)| fam.rho(dk / (s * k)))
                .sum::<f64>()
                / n
        };
        let start = linalg::median(d).max(f64::MIN_POSITIVE);
        loss::solve_scale(avg, fam.b, start)
    }

    /// Rescales `sigma` so that the generalized S-scale equals one.
    fn normalise(&self, mu: &DVector<f64>, sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<Pattern>, Vec<f64>)> {
        let factors = self.patterns.factor(&sigma)?;
        let d = self.distances(mu, &factors);
        let s = self.scale(&d);
        if !(s > 0.0 && s.is_finite()) {
            return Err(SurError::Degenerate {
                reason: "generalized S-scale is zero".into(),
                location: Some(mu.iter().cloned().collect()),
            });
        }
        let sigma = linalg::symmetrize(&(sigma * (s * s)));
        let factors = self.patterns.factor(&sigma)?;
        let d = d.iter().map(|v| v / s).collect();
        Ok((sigma, factors, d))
    }
}

fn check_pattern(mask: &DMatrix<bool>) -> Result<()> {
    let (n, m) = (mask.nrows(), mask.ncols());
    for k in 0..n {
        if (0..m).all(|j| mask[(k, j)]) {
            return Err(SurError::Unidentifiable(format!("row {k} has no observed cell")));
        }
    }
    for j in 0..m {
        let obs = (0..n).filter(|&k| !mask[(k, j)]).count();
        if obs < m + 1 {
            return Err(SurError::Unidentifiable(format!(
                "column {j} has {obs} observed cells, need at least {}",
                m + 1
            )));
        }
        for l in (j + 1)..m {
            if !(0..n).any(|k| !mask[(k, j)] && !mask[(k, l)]) {
                return Err(SurError::Unidentifiable(format!("columns {j} and {l} are never observed together")));
            }
        }
    }
    Ok(())
}

/// Coordinatewise median/MADN start with Gnanadesikan-Kettenring covariances,
/// projected onto the PD cone.
fn initial_estimate(data: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, m) = (data.nrows(), data.ncols());
    let observed = |j: usize| -> Vec<usize> { (0..n).filter(|&k| !mask[(k, j)]).collect() };
    let mut mu = DVector::zeros(m);
    let mut sd = DVector::zeros(m);
    for j in 0..m {
        let vals: Vec<f64> = observed(j).iter().map(|&k| data[(k, j)]).collect();
        mu[j] = linalg::median(&vals);
        sd[j] = linalg::madn(&vals);
    }
    if sd.iter().all(|&s| s == 0.0) {
        return Err(SurError::Degenerate {
            reason: "all observed cells coincide (zero scatter)".into(),
            location: Some(mu.iter().cloned().collect()),
        });
    }
    if let Some(j) = sd.iter().position(|&s| s == 0.0) {
        return Err(SurError::ZeroScale { column: j });
    }
    let mut sigma = DMatrix::zeros(m, m);
    for j in 0..m {
        sigma[(j, j)] = sd[j] * sd[j];
        for l in (j + 1)..m {
            let both: Vec<usize> = (0..n).filter(|&k| !mask[(k, j)] && !mask[(k, l)]).collect();
            let zj = |k: usize| (data[(k, j)] - mu[j]) / sd[j];
            let zl = |k: usize| (data[(k, l)] - mu[l]) / sd[l];
            let sum: Vec<f64> = both.iter().map(|&k| zj(k) + zl(k)).collect();
            let dif: Vec<f64> = both.iter().map(|&k| zj(k) - zl(k)).collect();
            let c = (linalg::madn(&sum).powi(2) - linalg::madn(&dif).powi(2)) / 4.0;
            sigma[(j, l)] = c * sd[j] * sd[l];
            sigma[(l, j)] = sigma[(j, l)];
        }
    }
    Ok((mu, linalg::floor_eigenvalues(&sigma, 1e-6)))
}

/// Generalized S-estimator of location and scatter for data with missing
/// cells (`mask == true`), computed by an EM-type reweighting iteration.
pub fn generalized_s(data: &DMatrix<f64>, mask: &DMatrix<bool>, family: &LossFamily, config: &GsConfig) -> Result<GsEstimate> {
    let (n, m) = (data.nrows(), data.ncols());
    if mask.shape() != data.shape() {
        return Err(SurError::InvalidInput("mask and data shapes differ".into()));
    }
    check_pattern(mask)?;
    for k in 0..n {
        for j in 0..m {
            if !mask[(k, j)] && !data[(k, j)].is_finite() {
                return Err(SurError::InvalidInput(format!("non-finite observed cell at ({k}, {j})")));
            }
        }
    }
    let patterns = Patterns::new(mask);
    let mut by_dim = vec![f64::NAN; m + 1];
    for (q, k) in by_dim.iter_mut().enumerate().skip(1) {
        *k = if q == m { 1.0 } else { loss::dimension_inflation(family, q)? };
    }
    let inflation = (0..n)
        .map(|k| by_dim[(0..m).filter(|&j| !mask[(k, j)]).count()])
        .collect();
    let ws = Workspace {
        data,
        patterns,
        inflation,
        family: *family,
    };

    let (mut mu, sigma0) = initial_estimate(data, mask)?;
    let (mut sigma, mut factors, mut d) = ws.normalise(&mu, sigma0)?;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let w: Vec<f64> = d
            .iter()
            .zip(&ws.inflation)
            .map(|(dk, k)| family.weight(dk / k))
            .collect();
        let wsum: f64 = w.iter().sum();
        if !(wsum > 0.0) {
            return Err(SurError::Degenerate {
                reason: "all rows received zero weight".into(),
                location: Some(mu.iter().cloned().collect()),
            });
        }
        // conditional imputation
        let mut xhat = DMatrix::zeros(n, m);
        for k in 0..n {
            let pat = &factors[ws.patterns.row_pattern[k]];
            for &j in &pat.obs {
                xhat[(k, j)] = data[(k, j)];
            }
            if !pat.mis.is_empty() {
                let diff = DVector::from_iterator(pat.obs.len(), pat.obs.iter().map(|&j| data[(k, j)] - mu[j]));
                let fill = &pat.reg * diff;
                for (a, &j) in pat.mis.iter().enumerate() {
                    xhat[(k, j)] = mu[j] + fill[a];
                }
            }
        }
        let mut mu_new = DVector::zeros(m);
        for k in 0..n {
            mu_new.axpy(w[k] / wsum, &xhat.row(k).transpose(), 1.0);
        }
        let mut raw = DMatrix::zeros(m, m);
        for k in 0..n {
            if w[k] == 0.0 {
                continue;
            }
            let c = xhat.row(k).transpose() - &mu_new;
            raw.ger(w[k] / wsum, &c, &c, 1.0);
            let pat = &factors[ws.patterns.row_pattern[k]];
            for (a, &ja) in pat.mis.iter().enumerate() {
                for (b, &jb) in pat.mis.iter().enumerate() {
                    raw[(ja, jb)] += w[k] / wsum * pat.cond[(a, b)];
                }
            }
        }
        let (sigma_new, factors_new, d_new) = ws.normalise(&mu_new, raw)?;

        let mut change = 0.0_f64;
        for j in 0..m {
            let sj = sigma_new[(j, j)].sqrt();
            change = change.max((mu_new[j] - mu[j]).abs() / sj);
            for l in 0..m {
                let denom = (sigma_new[(j, j)] * sigma_new[(l, l)]).sqrt();
                change = change.max((sigma_new[(j, l)] - sigma[(j, l)]).abs() / denom);
            }
        }
        mu = mu_new;
        sigma = sigma_new;
        factors = factors_new;
        d = d_new;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let scale = ws.scale(&d);
    Ok(GsEstimate {
        location: mu,
        scatter: sigma,
        scale,
        iterations,
        converged,
    })
}

/// Filter, then generalized S on the filtered data.
///
/// Rows whose every cell was flagged carry no information and are left out
/// of the second step.
pub fn two_step_gs(resid: &ResidualMatrix, family: &LossFamily) -> Result<TwoStepGs> {
    two_step_gs_with(resid, family, &GsConfig::default())
}

pub fn two_step_gs_with(resid: &ResidualMatrix, family: &LossFamily, config: &GsConfig) -> Result<TwoStepGs> {
    let filter = univariate_filter(resid)?;
    let m = resid.ncols();
    let keep: Vec<usize> = (0..resid.nrows())
        .filter(|&k| (0..m).any(|j| !filter.mask[(k, j)]))
        .collect();
    let estimate = if keep.len() == resid.nrows() {
        generalized_s(&resid.values, &filter.mask, family, config)?
    } else {
        let data = resid.values.select_rows(keep.iter());
        let mask = DMatrix::from_fn(keep.len(), m, |a, j| filter.mask[(keep[a], j)]);
        generalized_s(&data, &mask, family, config)?
    };
    Ok(TwoStepGs { estimate, filter })
}

/// [`two_step_gs`] with the bisquare family calibrated for 50% breakdown in `m` dimensions.
pub fn two_step_gs_default(resid: &ResidualMatrix) -> Result<TwoStepGs> {
    let family = loss::cached_breakdown_family(resid.ncols(), 0.5)?;
    two_step_gs(resid, &family)
}
