//! Monte Carlo metrics, coefficient inference and cell flagging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, SurError};
use crate::estimators::{Method, SurFit};
use crate::linalg;
use crate::model::SurSystem;

/// One replication of one (method, epsilon, k) cell of a simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub method: Method,
    pub epsilon: f64,
    pub k: f64,
    pub rep: usize,
    /// Squared coefficient error; `None` if the estimator failed.
    pub mse_contrib: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Mean squared Euclidean error of a set of estimates.
pub fn mse(estimates: &[DVector<f64>], truth: &DVector<f64>) -> Result<f64> {
    if estimates.is_empty() {
        return Err(SurError::InvalidInput("mse of an empty estimate list".into()));
    }
    let mut total = 0.0;
    for (r, b) in estimates.iter().enumerate() {
        if b.len() != truth.len() {
            return Err(SurError::InvalidInput(format!(
                "estimate {r} has length {}, expected {}",
                b.len(),
                truth.len()
            )));
        }
        total += (b - truth).norm_squared();
    }
    Ok(total / estimates.len() as f64)
}

/// Gaussian KL scatter divergence `tr(S Sigma^-1) - log|S Sigma^-1| - m`.
pub fn kl_divergence(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let m = sigma.nrows();
    if s.shape() != (m, m) || sigma.ncols() != m {
        return Err(SurError::InvalidInput(format!(
            "KL divergence of {:?} against {:?}",
            s.shape(),
            sigma.shape()
        )));
    }
    let cs = linalg::cholesky(s)?;
    let cg = linalg::cholesky(sigma)?;
    // tr(Sigma^-1 S) = ||L_g^-1 L_s||_F^2
    let mut l = cs.l();
    cg.l_dirty().solve_lower_triangular_mut(&mut l);
    let trace = l.norm_squared();
    let log_det = linalg::log_det_chol(&cs) - linalg::log_det_chol(&cg);
    Ok(trace - log_det - m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub equation: String,
    pub coefficient: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationFit {
    pub equation: String,
    pub r_squared: f64,
    pub adj_r_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTable {
    pub coefficients: Vec<CoefficientRow>,
    pub equations: Vec<EquationFit>,
    /// McElroy system R-squared under the final covariance.
    pub system_r_squared: f64,
}

pub fn equation_label(system: &SurSystem, i: usize) -> String {
    system
        .equation(i)
        .label
        .clone()
        .unwrap_or_else(|| format!("eq{}", i + 1))
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// z-tests, equation R-squared (cell-weighted for surerob) and the McElroy
/// system R-squared.
pub fn system_inference(fit: &SurFit, system: &SurSystem) -> Result<InferenceTable> {
    let cov = match (&fit.beta_cov, fit.method) {
        (_, Method::FastSur) | (None, _) => {
            return Err(SurError::Unsupported(format!(
                "inference unsupported for {}",
                fit.method.name().to_ascii_lowercase()
            )))
        }
        (Some(c), _) => c,
    };
    if fit.beta.len() != system.total_p() || fit.residuals.ncols() != system.m() {
        return Err(SurError::InvalidInput("fit does not belong to this system".into()));
    }
    let mut coefficients = Vec::with_capacity(system.total_p());
    for i in 0..system.m() {
        let eq = system.equation(i);
        for j in 0..eq.p() {
            let r = system.offset(i) + j;
            let estimate = fit.beta[r];
            let std_error = cov[(r, r)].max(0.0).sqrt();
            let z = if estimate == 0.0 { 0.0 } else { estimate / std_error };
            coefficients.push(CoefficientRow {
                equation: equation_label(system, i),
                coefficient: eq.coefficient_name(j),
                estimate,
                std_error,
                z,
                p_value: normal_p_value(z),
            });
        }
    }

    let n = system.n();
    let weighted = fit.method == Method::Surerob;
    let mut equations = Vec::with_capacity(system.m());
    for i in 0..system.m() {
        let y = &system.equation(i).response;
        let w = |k: usize| if weighted { fit.cell_weights[(k, i)] } else { 1.0 };
        let wsum: f64 = (0..n).map(w).sum();
        let ybar = (0..n).map(|k| w(k) * y[k]).sum::<f64>() / wsum;
        let rss: f64 = (0..n).map(|k| w(k) * fit.residuals.values[(k, i)].powi(2)).sum();
        let tss: f64 = (0..n).map(|k| w(k) * (y[k] - ybar).powi(2)).sum();
        if !(tss > 0.0) {
            return Err(SurError::Degenerate {
                reason: format!("response of equation {} has zero (weighted) variation", i + 1),
                location: None,
            });
        }
        let r2 = 1.0 - rss / tss;
        let p = system.equation(i).p() as f64;
        equations.push(EquationFit {
            equation: equation_label(system, i),
            r_squared: r2,
            adj_r_squared: 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p),
        });
    }

    let chol = linalg::cholesky(&fit.sigma2)?;
    let e = &fit.residuals.values;
    let mut yc = system.response_matrix();
    for mut col in yc.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let quad = |a: &DMatrix<f64>| (a.transpose() * a).component_mul(&chol.inverse()).sum();
    let system_r_squared = 1.0 - quad(e) / quad(&yc);
    Ok(InferenceTable {
        coefficients,
        equations,
        system_r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFlags {
    pub mask: DMatrix<bool>,
    pub cell_fraction: f64,
    pub row_fraction: f64,
}

/// Flags cells whose weight is below `threshold`.
pub fn flag_weights(weights: &DMatrix<f64>, threshold: f64) -> CellFlags {
    let mask = weights.map(|w| w < threshold);
    let (n, m) = mask.shape();
    let cells = mask.iter().filter(|&&f| f).count();
    let rows = (0..n).filter(|&k| mask.row(k).iter().any(|&f| f)).count();
    CellFlags {
        cell_fraction: if n * m == 0 { 0.0 } else { cells as f64 / (n * m) as f64 },
        row_fraction: if n == 0 { 0.0 } else { rows as f64 / n as f64 },
        mask,
    }
}

pub fn flag_cells(fit: &SurFit, threshold: f64) -> CellFlags {
    flag_weights(&fit.cell_weights, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_basic() {
        let t = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(mse(&[t.clone(), t.clone()], &t).unwrap(), 0.0);
        let off = DVector::from_vec(vec![1.0, 3.0]);
        assert_eq!(mse(&[off], &t).unwrap(), 1.0);
        assert!(mse(&[DVector::zeros(3)], &t).is_err());
        assert!(mse(&[], &t).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(kl_divergence(&s, &s).unwrap().abs() < 1e-12);
        let two = DMatrix::from_diagonal_element(2, 2, 2.0);
        let id = DMatrix::identity(2, 2);
        let want = 2.0 - 2.0 * 2f64.ln();
        assert!((kl_divergence(&two, &id).unwrap() - want).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(kl_divergence(&bad, &id).is_err());
    }

    #[test]
    fn p_values() {
        assert_eq!(normal_p_value(0.0), 1.0);
        let p = normal_p_value(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-9, "{p}");
    }

    #[test]
    fn flag_counts() {
        let mut w = DMatrix::from_element(10, 4, 1.0);
        assert_eq!(flag_weights(&w, 0.5).cell_fraction, 0.0);
        w[(3, 2)] = 0.4;
        let f = flag_weights(&w, 0.5);
        assert_eq!(f.cell_fraction, 0.025);
        assert_eq!(f.row_fraction, 0.1);
    }
}
