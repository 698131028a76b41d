//! System estimators: classical FGLS (`sure`), the cell-wise robust
//! reweighted FGLS (`surerob`) and the multivariate S-estimator (`fastSUR`).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellwise::{self, GsConfig};
use crate::error::{Result, SurError};
use crate::linalg;
use crate::loss::{self, LossFamily};
use crate::model::{self, ResidualMatrix, SurSystem};
use crate::regression::{self, MmConfig};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sure,
    Surerob,
    #[serde(alias = "fastSUR")]
    FastSur,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sure, Method::Surerob, Method::FastSur];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Sure => "sure",
            Method::Surerob => "surerob",
            Method::FastSur => "fastSUR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sure" => Ok(Method::Sure),
            "surerob" => Ok(Method::Surerob),
            "fastsur" => Ok(Method::FastSur),
            other => Err(SurError::InvalidInput(format!(
                "unknown method {other:?} (expected sure, surerob or fastsur)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Iterations per equation (surerob) or of the winning candidate (fastSUR).
    pub iterations: Vec<usize>,
    pub seconds: f64,
    pub warnings: Vec<String>,
    /// `log det S` after every refinement step of the fastSUR winner.
    pub log_det_trace: Vec<f64>,
}

/// Result of a system fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SurFit {
    pub method: Method,
    /// Stacked coefficients, equation by equation.
    pub beta: DVector<f64>,
    /// First-pass error covariance.
    pub sigma1: DMatrix<f64>,
    /// Final error covariance.
    pub sigma2: DMatrix<f64>,
    /// Residuals at `beta`.
    pub residuals: ResidualMatrix,
    /// First-step residuals (OLS for sure, MM for surerob).
    pub initial_residuals: DMatrix<f64>,
    /// First-step residual scale per equation.
    pub scales: Vec<f64>,
    /// n x m weights in `[0, 1]`.
    pub cell_weights: DMatrix<f64>,
    /// Coefficient covariance; `None` for fastSUR.
    pub beta_cov: Option<DMatrix<f64>>,
    pub diagnostics: Diagnostics,
}

/// How the surerob cell weights enter the GLS step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `X' W (S^-1 (x) I) W X`: each weight applied to both the design and
    /// the response side, so it enters the normal equations squared.
    #[default]
    Symmetric,
    /// `W^1/2` on both sides: each weight enters once, as in classical WLS.
    SquareRoot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurerobConfig {
    pub mm: MmConfig,
    pub gs: GsConfig,
    pub weighting: Weighting,
    /// Breakdown point used to calibrate the covariance step.
    pub bdp: f64,
    pub seed: u64,
}

impl Default for SurerobConfig {
    fn default() -> Self {
        SurerobConfig {
            mm: MmConfig::default(),
            gs: GsConfig::default(),
            weighting: Weighting::Symmetric,
            bdp: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastSurConfig {
    pub n_cand: usize,
    pub k_iter: usize,
    pub best_of: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub bdp: f64,
    pub seed: u64,
}

impl Default for FastSurConfig {
    fn default() -> Self {
        FastSurConfig {
            n_cand: 500,
            k_iter: 2,
            best_of: 5,
            max_iter: 100,
            tol: 1e-8,
            bdp: 0.5,
            seed: 0,
        }
    }
}

fn inverse_pd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(linalg::symmetrize(&linalg::cholesky(a)?.inverse()))
}

/// Inverse of a covariance estimate. Pivots below `RANK_TOL` times the
/// largest variance count as singular even when Cholesky succeeds.
fn covariance_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let singular = || SurError::SingularCovariance {
        eigenvalues: linalg::sorted_eigen(sigma).0.iter().cloned().collect(),
    };
    let chol = linalg::cholesky(sigma).map_err(|_| singular())?;
    let top = sigma.diagonal().amax();
    if chol.l_dirty().diagonal().iter().any(|l| l * l <= linalg::RANK_TOL * top) {
        return Err(singular());
    }
    Ok(linalg::symmetrize(&chol.inverse()))
}

/// Normal equations `A = X' W (S^-1 (x) I_n) W X` and `X' W (S^-1 (x) I_n) W y`,
/// assembled as m x m blocks `s^ij X_i' diag(w_i w_j) X_j`.
///
/// `cell_w` of `None` means unit weights.
pub fn gls_normal_equations(
    system: &SurSystem,
    sigma_inv: &DMatrix<f64>,
    cell_w: Option<&DMatrix<f64>>,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = system.m();
    let n = system.n();
    let p_total = system.total_p();
    let mut a = DMatrix::zeros(p_total, p_total);
    let mut rhs = DVector::zeros(p_total);
    for i in 0..m {
        let eq_i = system.equation(i);
        let oi = system.offset(i);
        for j in i..m {
            let eq_j = system.equation(j);
            let oj = system.offset(j);
            let s = sigma_inv[(i, j)];
            let v = DVector::from_fn(n, |k, _| match cell_w {
                Some(w) => s * w[(k, i)] * w[(k, j)],
                None => s,
            });
            let xi_v = DMatrix::from_fn(n, eq_i.p(), |k, c| eq_i.design[(k, c)] * v[k]);
            let block = xi_v.transpose() * &eq_j.design;
            a.view_mut((oi, oj), (eq_i.p(), eq_j.p())).copy_from(&block);
            if i != j {
                a.view_mut((oj, oi), (eq_j.p(), eq_i.p())).copy_from(&block.transpose());
                let xj_v = DMatrix::from_fn(n, eq_j.p(), |k, c| eq_j.design[(k, c)] * v[k]);
                let mut r_j = rhs.rows_mut(oj, eq_j.p());
                r_j += xj_v.transpose() * &eq_i.response;
            }
            let mut r_i = rhs.rows_mut(oi, eq_i.p());
            r_i += xi_v.transpose() * &eq_j.response;
        }
    }
    (linalg::symmetrize(&a), rhs)
}

/// Weighted GLS coefficients for a given error covariance. Returns the
/// coefficients and the normal matrix.
pub fn gls(system: &SurSystem, sigma: &DMatrix<f64>, cell_w: Option<&DMatrix<f64>>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sigma_inv = covariance_inverse(sigma)?;
    let (a, rhs) = gls_normal_equations(system, &sigma_inv, cell_w);
    let chol = linalg::cholesky(&a).map_err(|_| {
        SurError::Degenerate {
            reason: "GLS normal equations are singular".into(),
            location: None,
        }
    })?;
    Ok((chol.solve(&rhs), a))
}

fn sample_covariance(e: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::symmetrize(&(e.transpose() * e / e.nrows() as f64))
}

fn check_covariance(sigma: &DMatrix<f64>) -> Result<()> {
    covariance_inverse(sigma).map(|_| ())
}

/// Classical two-step FGLS.
pub fn fit_sure(system: &SurSystem) -> Result<SurFit> {
    let start = Instant::now();
    system.check_rank()?;
    let fits = system
        .equations()
        .iter()
        .map(regression::ols)
        .collect::<Result<Vec<_>>>()?;
    let beta_ols = system.concat_beta(&fits.iter().map(|f| f.beta.clone()).collect::<Vec<_>>());
    let e1 = model::residuals(system, &beta_ols)?.values;
    let sigma1 = sample_covariance(&e1);
    check_covariance(&sigma1)?;
    let (beta, _) = gls(system, &sigma1, None)?;
    let residuals = model::residuals(system, &beta)?;
    let sigma2 = sample_covariance(&residuals.values);
    let (_, a2) = gls(system, &sigma2, None)?;
    let beta_cov = inverse_pd(&a2)?;
    Ok(SurFit {
        method: Method::Sure,
        beta,
        sigma1,
        sigma2,
        cell_weights: DMatrix::from_element(system.n(), system.m(), 1.0),
        residuals,
        initial_residuals: e1,
        scales: fits.iter().map(|f| f.scale).collect(),
        beta_cov: Some(beta_cov),
        diagnostics: Diagnostics {
            iterations: vec![1; system.m()],
            seconds: start.elapsed().as_secs_f64(),
            ..Default::default()
        },
    })
}

/// Cell weights `psi(e/s) / (e/s)`, 1 where the residual is exactly zero.
pub fn cell_weights(residuals: &DMatrix<f64>, scales: &[f64], family: &LossFamily) -> DMatrix<f64> {
    DMatrix::from_fn(residuals.nrows(), residuals.ncols(), |k, i| {
        let e = residuals[(k, i)];
        if e == 0.0 {
            1.0
        } else if scales[i] == 0.0 {
            0.0
        } else {
            loss::psi_and_weight(e / scales[i], family).1
        }
    })
}

/// Robust FGLS: equation-wise MM fits, bisquare cell weights and a two-step
/// generalized S covariance feeding a weighted GLS step.
pub fn fit_surerob(system: &SurSystem, config: &SurerobConfig) -> Result<SurFit> {
    let start = Instant::now();
    system.check_rank()?;
    let m = system.m();
    let mm_fits = (0..m)
        .into_par_iter()
        .map(|i| {
            let cfg = MmConfig {
                seed: seeds::derive_seed(config.seed, &[i as u64]),
                ..config.mm.clone()
            };
            regression::mm_regression(system.equation(i), &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    for (i, f) in mm_fits.iter().enumerate() {
        if !f.converged {
            warnings.push(format!("MM regression of equation {i} did not converge"));
        }
    }
    let beta_mm = system.concat_beta(&mm_fits.iter().map(|f| f.beta.clone()).collect::<Vec<_>>());
    let e1 = model::residuals(system, &beta_mm)?.values;
    let scales: Vec<f64> = mm_fits.iter().map(|f| f.scale).collect();
    let weight_family = config.mm.m_family()?;
    let w = cell_weights(&e1, &scales, &weight_family);

    let cov_family = loss::cached_breakdown_family(m, config.bdp)?;
    let gs1 = cellwise::two_step_gs_with(&ResidualMatrix::new(e1.clone()), &cov_family, &config.gs)?;
    if !gs1.estimate.converged {
        warnings.push("first covariance step did not converge".into());
    }
    let sigma1 = gs1.estimate.scatter;
    let gls_w = match config.weighting {
        Weighting::Symmetric => w.clone(),
        Weighting::SquareRoot => w.map(f64::sqrt),
    };
    let (beta, _) = gls(system, &sigma1, Some(&gls_w))?;
    let residuals = model::residuals(system, &beta)?;
    let gs2 = cellwise::two_step_gs_with(&residuals, &cov_family, &config.gs)?;
    if !gs2.estimate.converged {
        warnings.push("final covariance step did not converge".into());
    }
    let sigma2 = gs2.estimate.scatter;
    let (_, a2) = gls(system, &sigma2, Some(&gls_w))?;
    let beta_cov = inverse_pd(&a2)?;
    Ok(SurFit {
        method: Method::Surerob,
        beta,
        sigma1,
        sigma2,
        residuals,
        initial_residuals: e1,
        scales,
        cell_weights: w,
        beta_cov: Some(beta_cov),
        diagnostics: Diagnostics {
            iterations: mm_fits.iter().map(|f| f.iterations).collect(),
            seconds: start.elapsed().as_secs_f64(),
            warnings,
            ..Default::default()
        },
    })
}

/// Mahalanobis norms of the rows of `e` under `s`.
fn row_distances(e: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = linalg::cholesky(s)?;
    let sol = chol.solve(&e.transpose());
    Ok((0..e.nrows())
        .map(|k| e.row(k).transpose().dot(&sol.column(k)).max(0.0).sqrt())
        .collect())
}

/// One S-estimation state of the fastSUR search.
#[derive(Debug, Clone)]
struct SurState {
    beta: DVector<f64>,
    /// Scatter normalised so that the M-scale of the distances is one.
    scatter: DMatrix<f64>,
    log_det: f64,
    weights: Vec<f64>,
}

/// Refined state, `log det` trace, iterations and convergence flag.
type Refined = (SurState, Vec<f64>, usize, bool);

struct FastSur<'a> {
    system: &'a SurSystem,
    family: LossFamily,
}

impl FastSur<'_> {
    fn m_scale(&self, d: &[f64]) -> f64 {
        let start = linalg::median(d).max(f64::MIN_POSITIVE);
        loss::solve_m_scale(d, &self.family, start)
    }

    fn residuals(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(model::residuals(self.system, beta)?.values)
    }

    /// Rescales `s` so that the M-scale constraint holds at residuals `e`.
    /// With `exact == false` the scale gets a single fixed-point update from
    /// 1, which is enough when `s` is already nearly normalised.
    fn normalise(&self, beta: DVector<f64>, e: &DMatrix<f64>, s: DMatrix<f64>, exact: bool) -> Result<SurState> {
        let d = row_distances(e, &s)?;
        let sigma = if exact {
            self.m_scale(&d)
        } else {
            (self.family.mean_rho(&d, 1.0) / self.family.b).sqrt()
        };
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(SurError::Degenerate {
                reason: "zero M-scale of Mahalanobis distances".into(),
                location: None,
            });
        }
        let scatter = linalg::symmetrize(&(s * (sigma * sigma)));
        let log_det = linalg::log_det_chol(&linalg::cholesky(&scatter)?);
        let weights = d.iter().map(|v| self.family.weight(v / sigma)).collect();
        Ok(SurState {
            beta,
            scatter,
            log_det,
            weights,
        })
    }

    /// B-step (weighted GLS) followed by the S-step (reweighted scatter).
    fn step(&self, state: &SurState, exact: bool) -> Result<SurState> {
        let n = self.system.n();
        let m = self.system.m();
        let root_w = DMatrix::from_fn(n, m, |k, _| state.weights[k].sqrt());
        let (beta, _) = gls(self.system, &state.scatter, Some(&root_w))?;
        let e = self.residuals(&beta)?;
        let mid = self.normalise(beta, &e, state.scatter.clone(), exact)?;
        let wsum: f64 = mid.weights.iter().sum();
        if !(wsum > 0.0) {
            return Err(SurError::Degenerate {
                reason: "all rows received zero weight".into(),
                location: None,
            });
        }
        let mut raw = DMatrix::zeros(m, m);
        for k in 0..n {
            if mid.weights[k] > 0.0 {
                let ek = e.row(k).transpose();
                raw.ger(mid.weights[k] / wsum, &ek, &ek, 1.0);
            }
        }
        let next = self.normalise(mid.beta.clone(), &e, raw, exact)?;
        debug_assert!(
            !exact || next.log_det <= state.log_det + 1e-9 * (1.0 + state.log_det.abs()),
            "log det increased: {} -> {}",
            state.log_det,
            next.log_det
        );
        Ok(next)
    }

    fn candidate(&self, seed: u64, idx: usize, k_iter: usize) -> Result<SurState> {
        let sys = self.system;
        let (n, m) = (sys.n(), sys.m());
        let h = m + sys.max_p();
        let mut rng = seeds::rng_for(seed, &[idx as u64]);
        for _ in 0..100 {
            let rows = index::sample(&mut rng, n, h).into_vec();
            let blocks: Option<Vec<DVector<f64>>> = sys
                .equations()
                .iter()
                .map(|eq| {
                    let x = eq.design.select_rows(rows.iter());
                    let y = DVector::from_iterator(h, rows.iter().map(|&k| eq.response[k]));
                    regression::least_squares(&x, &y)
                })
                .collect();
            let Some(blocks) = blocks else { continue };
            let beta = sys.concat_beta(&blocks);
            let e = self.residuals(&beta)?;
            let sub = e.select_rows(rows.iter());
            let s = sample_covariance(&sub);
            if !(s.trace() > 0.0) {
                continue;
            }
            let s = linalg::floor_eigenvalues(&s, 1e-6);
            let Ok(mut state) = self.normalise(beta, &e, s, true) else { continue };
            for _ in 0..k_iter {
                state = self.step(&state, false)?;
            }
            return Ok(state);
        }
        Err(SurError::Subsampling(format!(
            "no usable {h}-row subset for candidate {idx} after 100 draws"
        )))
    }

    fn refine(&self, mut state: SurState, max_iter: usize, tol: f64) -> Result<Refined> {
        let mut trace = vec![state.log_det];
        for it in 1..=max_iter {
            let next = self.step(&state, true)?;
            let rel = ((next.log_det - state.log_det).exp() - 1.0).abs();
            trace.push(next.log_det);
            state = next;
            if rel < tol {
                return Ok((state, trace, it, true));
            }
        }
        Ok((state, trace, max_iter, false))
    }
}

/// Multivariate S-estimator of the SUR model (minimum `det S` subject to an
/// M-scale constraint on the Mahalanobis residual norms), computed by
/// subsampling candidates, short refinement and full refinement of the best.
pub fn fit_fast_sur(system: &SurSystem, config: &FastSurConfig) -> Result<SurFit> {
    let start = Instant::now();
    let (n, m) = (system.n(), system.m());
    if n <= m + system.max_p() {
        return Err(SurError::InvalidInput(format!(
            "fastSUR needs n > m + max p_i (n = {n}, m = {m}, max p_i = {})",
            system.max_p()
        )));
    }
    system.check_rank()?;
    let engine = FastSur {
        system,
        family: loss::cached_breakdown_family(m, config.bdp)?,
    };
    let results: Vec<(usize, Result<SurState>)> = (0..config.n_cand)
        .into_par_iter()
        .map(|c| (c, engine.candidate(config.seed, c, config.k_iter)))
        .collect();
    // Visit candidates in index order, keeping the best `best_of`. Once the
    // list is full, a candidate is normalised exactly only if its shape,
    // scaled to the worst kept determinant, has mean rho at most b.
    let keep = config.best_of.max(1);
    let mut cands: Vec<(usize, SurState)> = Vec::with_capacity(keep + 1);
    for (c, r) in results {
        let Ok(state) = r else { continue };
        let e = engine.residuals(&state.beta)?;
        if cands.len() == keep {
            let worst = cands[keep - 1].1.log_det;
            let shape = &state.scatter * ((worst - state.log_det) / m as f64).exp();
            let Ok(d) = row_distances(&e, &shape) else { continue };
            if engine.family.mean_rho(&d, 1.0) > engine.family.b {
                continue;
            }
        }
        let Ok(state) = engine.normalise(state.beta, &e, state.scatter, true) else { continue };
        cands.push((c, state));
        cands.sort_by(|a, b| a.1.log_det.total_cmp(&b.1.log_det).then(a.0.cmp(&b.0)));
        cands.truncate(keep);
    }
    if cands.is_empty() {
        return Err(SurError::Subsampling("all fastSUR candidates were degenerate".into()));
    }
    let refined: Vec<Result<Refined>> = cands
        .into_par_iter()
        .map(|(_, s)| engine.refine(s, config.max_iter, config.tol))
        .collect();
    let mut best: Option<Refined> = None;
    for r in refined.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| r.0.log_det < b.0.log_det) {
            best = Some(r);
        }
    }
    let (state, trace, iterations, converged) =
        best.ok_or_else(|| SurError::Subsampling("refinement failed for every retained candidate".into()))?;
    let residuals = model::residuals(system, &state.beta)?;
    let mut warnings = Vec::new();
    if !converged {
        warnings.push("fastSUR refinement reached the iteration limit".into());
    }
    Ok(SurFit {
        method: Method::FastSur,
        beta: state.beta.clone(),
        sigma1: state.scatter.clone(),
        sigma2: state.scatter.clone(),
        initial_residuals: residuals.values.clone(),
        scales: (0..m).map(|i| state.scatter[(i, i)].sqrt()).collect(),
        cell_weights: DMatrix::from_fn(n, m, |k, _| state.weights[k]),
        residuals,
        beta_cov: None,
        diagnostics: Diagnostics {
            iterations: vec![iterations],
            seconds: start.elapsed().as_secs_f64(),
            warnings,
            log_det_trace: trace,
        },
    })
}

/// Fits `method` with default settings and the given seed.
pub fn fit(system: &SurSystem, method: Method, seed: u64) -> Result<SurFit> {
    match method {
        Method::Sure => fit_sure(system),
        Method::Surerob => fit_surerob(
            system,
            &SurerobConfig {
                seed,
                ..Default::default()
            },
        ),
        Method::FastSur => fit_fast_sur(
            system,
            &FastSurConfig {
                seed,
                ..Default::default()
            },
        ),
    }
}
