//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Result, SurError};

/// Relative singular-value tolerance used for every rank decision.
pub const RANK_TOL: f64 = 1e-10;

/// Indices of columns that are linearly dependent on earlier columns.
///
/// Rank is decided against `RANK_TOL * sigma_max` of the full matrix.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    if p == 0 {
        return Vec::new();
    }
    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return (0..p).collect();
    }
    let tol = RANK_TOL * smax;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank == p {
        return Vec::new();
    }
    let mut basis: Vec<usize> = Vec::with_capacity(p);
    let mut dependent = Vec::new();
    for j in 0..p {
        let mut cols = basis.clone();
        cols.push(j);
        let sub = x.select_columns(cols.iter());
        let sv = sub.svd(false, false).singular_values;
        let r = sv.iter().filter(|&&s| s > tol).count();
        if r == cols.len() {
            basis.push(j);
        } else {
            dependent.push(j);
        }
    }
    dependent
}

/// Eigenvalues sorted ascending together with matching eigenvector columns.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(idx.len(), idx.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(idx.iter());
    (values, vectors)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SurError::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
        });
    }
    match Cholesky::new(symmetrize(a)) {
        Some(c) => Ok(c),
        None => Err(SurError::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(a),
        }),
    }
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Projects a symmetric matrix onto the PD cone by flooring its eigenvalues
/// at `rel * trace / m`.
pub fn floor_eigenvalues(a: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let m = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let floor = rel * a.trace().abs() / m as f64;
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let (lower, mid, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    let mid = *mid;
    if n % 2 == 1 {
        mid
    } else {
        let below = lower.iter().cloned().max_by(f64::total_cmp).expect("n >= 2");
        0.5 * (below + mid)
    }
}

/// Normalized median absolute deviation about the median.
pub fn madn(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    1.482602218505602 * median(&dev)
}
