//! Single-equation OLS and MM regression.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Result, SurError};
use crate::linalg;
use crate::loss::{self, LossFamily};
use crate::model::Equation;
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub beta: DVector<f64>,
    /// Residual scale in response units.
    pub scale: f64,
    /// Final IRLS weights, each in `[0, 1]`.
    pub weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl RegressionFit {
    pub fn residuals(&self, eq: &Equation) -> DVector<f64> {
        &eq.response - &eq.design * &self.beta
    }
}

/// Least squares through a thin QR factorisation. `None` if `x` is singular.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if !(diag_max > 0.0) || r.diagonal().iter().any(|d| d.abs() <= linalg::RANK_TOL * diag_max) {
        return None;
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    r.solve_upper_triangular(&qty.rows(0, p).into_owned())
}

/// Weighted least squares minimising `sum w_k (y_k - x_k' beta)^2`.
pub(crate) fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let sw = w.map(f64::sqrt);
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |k, j| x[(k, j)] * sw[k]);
    let yw = y.component_mul(&sw);
    least_squares(&xw, &yw)
}

pub fn ols(eq: &Equation) -> Result<RegressionFit> {
    eq.check_rank(0)?;
    let beta = least_squares(&eq.design, &eq.response).ok_or(SurError::RankDeficient {
        equation: 0,
        columns: linalg::dependent_columns(&eq.design),
    })?;
    let r = &eq.response - &eq.design * &beta;
    let dof = (eq.n() - eq.p()) as f64;
    Ok(RegressionFit {
        scale: (r.norm_squared() / dof).sqrt(),
        weights: DVector::from_element(eq.n(), 1.0),
        beta,
        converged: true,
        iterations: 1,
    })
}

/// A subsampling candidate of the S stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub beta: DVector<f64>,
    pub scale: f64,
    pub index: usize,
}

fn irls_step(eq: &Equation, beta: &DVector<f64>, family: &LossFamily) -> Option<(DVector<f64>, f64)> {
    let r = &eq.response - &eq.design * beta;
    let s = loss::m_scale(r.as_slice(), family);
    if s == 0.0 {
        return None;
    }
    let w = r.map(|v| family.weight(v / s));
    weighted_least_squares(&eq.design, &eq.response, &w).map(|b| (b, s))
}

fn exact_fit(eq: &Equation, rows: &[usize]) -> Option<DVector<f64>> {
    let xs = eq.design.select_rows(rows.iter());
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&k| eq.response[k]));
    least_squares(&xs, &ys)
}

/// Weighted least squares through the normal equations. Cheaper than the QR
/// route and accurate enough for the short candidate refinements.
fn weighted_normal_equations(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for k in 0..x.nrows() {
        if w[k] == 0.0 {
            continue;
        }
        let row = x.row(k);
        for a in 0..p {
            let wa = w[k] * row[a];
            xtwy[a] += wa * y[k];
            for b in 0..=a {
                xtwx[(a, b)] += wa * row[b];
            }
        }
    }
    xtwx.fill_upper_triangle_with_lower_triangle();
    xtwx.cholesky().map(|c| c.solve(&xtwy))
}

/// Elemental-subset starting points for the S-estimator.
///
/// Each subset draws from its own RNG stream `(seed, subset index)`, so the
/// result does not depend on the thread count. Candidates are improved by
/// `k_iter` IRLS steps starting from the scale `median|r| / 0.6745`, each
/// followed by one fixed-point update of the scale instead of a full solve.
/// Candidates are then visited in index order and a full M-scale is solved
/// only when `mean rho(r / s_best) <= b`, i.e. when the candidate can match
/// or beat the best scale so far. The evaluated
/// candidates are returned sorted by scale, ties broken by smaller `|beta|`
/// and then by index; the first one is the best of all subsets.
pub fn s_initial(
    eq: &Equation,
    family: &LossFamily,
    n_subsets: usize,
    k_iter: usize,
    seed: u64,
) -> Result<Vec<Candidate>> {
    let (n, p) = (eq.n(), eq.p());
    if n <= p || n_subsets == 0 {
        return Err(SurError::InvalidInput(format!(
            "subsampling needs n > p and at least one subset (n = {n}, p = {p})"
        )));
    }
    let refined: Vec<(DVector<f64>, DVector<f64>)> = (0..n_subsets)
        .into_par_iter()
        .map(|idx| {
            let mut rng = seeds::rng_for(seed, &[idx as u64]);
            let mut beta = None;
            for _ in 0..100 {
                let rows = index::sample(&mut rng, n, p).into_vec();
                if let Some(b) = exact_fit(eq, &rows) {
                    beta = Some(b);
                    break;
                }
            }
            let mut beta = beta.ok_or_else(|| {
                SurError::Subsampling(format!("no nonsingular {p}-row subset found after 100 draws"))
            })?;
            let mut r = &eq.response - &eq.design * &beta;
            let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
            let mut s = linalg::median(&abs) / 0.6745;
            for _ in 0..k_iter {
                if s == 0.0 {
                    break;
                }
                let w = r.map(|v| family.weight(v / s));
                let Some(b) = weighted_normal_equations(&eq.design, &eq.response, &w) else { break };
                beta = b;
                r = &eq.response - &eq.design * &beta;
                s *= (family.mean_rho(r.as_slice(), s) / family.b).sqrt();
            }
            Ok((beta, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cands: Vec<Candidate> = Vec::new();
    let mut best = f64::INFINITY;
    for (index, (beta, r)) in refined.into_iter().enumerate() {
        if best > 0.0 && best.is_finite() && family.mean_rho(r.as_slice(), best) > family.b {
            continue;
        }
        let scale = loss::m_scale(r.as_slice(), family);
        best = best.min(scale);
        cands.push(Candidate { beta, scale, index });
    }
    cands.sort_by(|a, b| {
        a.scale
            .total_cmp(&b.scale)
            .then(a.beta.norm().total_cmp(&b.beta.norm()))
            .then(a.index.cmp(&b.index))
    });
    Ok(cands)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmConfig {
    pub n_subsets: usize,
    /// IRLS steps applied to every subsampling candidate.
    pub k_iter: usize,
    /// Breakdown point of the S stage.
    pub bdp: f64,
    /// Normal efficiency of the M stage.
    pub efficiency: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for MmConfig {
    fn default() -> Self {
        MmConfig {
            n_subsets: 500,
            k_iter: 2,
            bdp: 0.5,
            efficiency: 0.95,
            max_iter: 500,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl MmConfig {
    pub fn s_family(&self) -> Result<LossFamily> {
        loss::cached_breakdown_family(1, self.bdp)
    }

    pub fn m_family(&self) -> Result<LossFamily> {
        loss::cached_efficiency_family(self.efficiency)
    }
}

fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    (new - old).amax() / (1.0 + new.amax())
}

/// Sum of `rho(r_k / scale)` for the M-step objective.
pub fn m_objective(eq: &Equation, beta: &DVector<f64>, scale: f64, family: &LossFamily) -> f64 {
    let r = &eq.response - &eq.design * beta;
    r.iter().map(|v| family.rho(v / scale)).sum()
}

/// IRLS for the regression M-estimator with the scale held fixed.
///
/// Returns `(beta, iterations, converged)`. When `trace` is given, the
/// objective before every step and after the last one is appended to it.
pub fn m_step(
    eq: &Equation,
    start: &DVector<f64>,
    scale: f64,
    family: &LossFamily,
    max_iter: usize,
    tol: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> (DVector<f64>, usize, bool) {
    let mut beta = start.clone();
    let mut obj = m_objective(eq, &beta, scale, family);
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj);
    }
    for it in 1..=max_iter {
        let r = &eq.response - &eq.design * &beta;
        let w = r.map(|v| family.weight(v / scale));
        let Some(next) = weighted_least_squares(&eq.design, &eq.response, &w) else {
            return (beta, it, false);
        };
        let next_obj = m_objective(eq, &next, scale, family);
        debug_assert!(
            next_obj <= obj * (1.0 + 1e-10) + 1e-12,
            "M-step objective increased: {obj} -> {next_obj}"
        );
        if let Some(t) = trace.as_deref_mut() {
            t.push(next_obj);
        }
        let change = relative_change(&next, &beta);
        beta = next;
        obj = next_obj;
        if change < tol {
            return (beta, it, true);
        }
    }
    (beta, max_iter, false)
}

/// S-estimate of regression: best subsampling candidate refined by IRLS.
/// Returns `(beta, scale, iterations, converged)`.
pub fn s_regression(eq: &Equation, config: &MmConfig) -> Result<(DVector<f64>, f64, usize, bool)> {
    let family = config.s_family()?;
    let cands = s_initial(eq, &family, config.n_subsets, config.k_iter, config.seed)?;
    let mut beta = cands[0].beta.clone();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let Some((next, _)) = irls_step(eq, &beta, &family) else {
            converged = true;
            break;
        };
        let change = relative_change(&next, &beta);
        beta = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let r = &eq.response - &eq.design * &beta;
    let scale = loss::m_scale(r.as_slice(), &family);
    Ok((beta, scale, iterations, converged))
}

/// MM regression: a 50% breakdown S stage fixing the scale, followed by an
/// efficiency-tuned bisquare M stage.
pub fn mm_regression(eq: &Equation, config: &MmConfig) -> Result<RegressionFit> {
    let (n, p) = (eq.n(), eq.p());
    if n <= 2 * p {
        return Err(SurError::InvalidInput(format!(
            "MM regression needs n > 2p (n = {n}, p = {p})"
        )));
    }
    eq.check_rank(0)?;
    let (beta_s, scale, s_iter, s_conv) = s_regression(eq, config)?;
    if scale == 0.0 {
        // exact fit of a majority of the data
        let r = &eq.response - &eq.design * &beta_s;
        return Ok(RegressionFit {
            weights: r.map(|v| if v == 0.0 { 1.0 } else { 0.0 }),
            beta: beta_s,
            scale,
            converged: s_conv,
            iterations: s_iter,
        });
    }
    let family = config.m_family()?;
    let (beta, m_iter, m_conv) = m_step(eq, &beta_s, scale, &family, config.max_iter, config.tol, None);
    let r = &eq.response - &eq.design * &beta;
    Ok(RegressionFit {
        weights: r.map(|v| family.weight(v / scale)),
        beta,
        scale,
        converged: s_conv && m_conv,
        iterations: s_iter + m_iter,
    })
}
