//! SUR systems in per-equation, stacked and multivariate (n x m) form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SurError};
use crate::linalg;

/// One regression equation `y_i = X_i beta_i + e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub response: DVector<f64>,
    pub design: DMatrix<f64>,
    /// Optional coefficient labels, one per design column.
    pub names: Option<Vec<String>>,
    /// Optional label of the response.
    pub label: Option<String>,
}

impl Equation {
    pub fn new(response: DVector<f64>, design: DMatrix<f64>) -> Self {
        Equation {
            response,
            design,
            names: None,
            label: None,
        }
    }

    pub fn with_names(mut self, label: impl Into<String>, names: Vec<String>) -> Self {
        self.label = Some(label.into());
        self.names = Some(names);
        self
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// Errors naming the dependent columns if the design is rank deficient.
    pub fn check_rank(&self, index: usize) -> Result<()> {
        let dep = linalg::dependent_columns(&self.design);
        if dep.is_empty() {
            Ok(())
        } else {
            Err(SurError::RankDeficient {
                equation: index,
                columns: dep,
            })
        }
    }

    pub fn coefficient_name(&self, j: usize) -> String {
        match &self.names {
            Some(names) => names[j].clone(),
            None => format!("x{}", j + 1),
        }
    }
}

/// An ordered system of `m` equations observed on the same `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SurSystem {
    equations: Vec<Equation>,
    n: usize,
    offsets: Vec<usize>,
}

impl SurSystem {
    pub fn new(equations: Vec<Equation>) -> Result<Self> {
        if equations.is_empty() {
            return Err(SurError::InvalidInput("a system needs at least one equation".into()));
        }
        let n = equations[0].n();
        let mut offsets = Vec::with_capacity(equations.len() + 1);
        let mut total = 0;
        for (i, eq) in equations.iter().enumerate() {
            if eq.design.nrows() != eq.response.len() {
                return Err(SurError::DimensionMismatch {
                    equation: i,
                    detail: format!(
                        "response length {} but design has {} rows",
                        eq.response.len(),
                        eq.design.nrows()
                    ),
                });
            }
            if eq.n() != n {
                return Err(SurError::DimensionMismatch {
                    equation: i,
                    detail: format!("{} observations, expected {}", eq.n(), n),
                });
            }
            if eq.p() == 0 {
                return Err(SurError::DimensionMismatch {
                    equation: i,
                    detail: "design has no columns".into(),
                });
            }
            if let Some(names) = &eq.names {
                if names.len() != eq.p() {
                    return Err(SurError::DimensionMismatch {
                        equation: i,
                        detail: format!("{} names for {} columns", names.len(), eq.p()),
                    });
                }
            }
            offsets.push(total);
            total += eq.p();
        }
        offsets.push(total);
        let max_p = equations.iter().map(Equation::p).max().unwrap_or(0);
        if n <= max_p {
            return Err(SurError::InvalidInput(format!(
                "need n > max p_i, got n = {n}, max p_i = {max_p}"
            )));
        }
        Ok(SurSystem {
            equations,
            n,
            offsets,
        })
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn equation(&self, i: usize) -> &Equation {
        &self.equations[i]
    }

    pub fn m(&self) -> usize {
        self.equations.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total coefficient count `P = sum p_i`.
    pub fn total_p(&self) -> usize {
        self.offsets[self.equations.len()]
    }

    pub fn max_p(&self) -> usize {
        self.equations.iter().map(Equation::p).max().unwrap_or(0)
    }

    /// Offset of equation `i`'s coefficients in the stacked vector.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn check_rank(&self) -> Result<()> {
        self.equations
            .iter()
            .enumerate()
            .try_for_each(|(i, eq)| eq.check_rank(i))
    }

    /// The n x m response matrix.
    pub fn response_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m(), |k, i| self.equations[i].response[k])
    }

    /// Splits a stacked coefficient vector into per-equation blocks.
    pub fn split_beta(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.m())
            .map(|i| beta.rows(self.offsets[i], self.equations[i].p()).into_owned())
            .collect()
    }

    pub fn concat_beta(&self, blocks: &[DVector<f64>]) -> DVector<f64> {
        let mut beta = DVector::zeros(self.total_p());
        for (i, b) in blocks.iter().enumerate() {
            beta.rows_mut(self.offsets[i], b.len()).copy_from(b);
        }
        beta
    }

    /// Blockwise fitted values as an n x m matrix.
    pub fn fitted(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let mut out = DMatrix::zeros(self.n, self.m());
        for (i, eq) in self.equations.iter().enumerate() {
            let b = beta.rows(self.offsets[i], eq.p());
            out.set_column(i, &(&eq.design * b));
        }
        Ok(out)
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.total_p() {
            return Err(SurError::InvalidInput(format!(
                "coefficient vector has length {}, expected {}",
                beta.len(),
                self.total_p()
            )));
        }
        Ok(())
    }

    /// Same designs, new responses given as an n x m matrix.
    pub fn with_responses(&self, y: &DMatrix<f64>) -> Result<SurSystem> {
        if y.nrows() != self.n || y.ncols() != self.m() {
            return Err(SurError::InvalidInput(format!(
                "response matrix is {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                self.n,
                self.m()
            )));
        }
        let equations = self
            .equations
            .iter()
            .enumerate()
            .map(|(i, eq)| Equation {
                response: y.column(i).into_owned(),
                ..eq.clone()
            })
            .collect();
        SurSystem::new(equations)
    }
}

/// The stacked form `y = X beta + e` with block-diagonal `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// `(row_start, col_start)` of each diagonal block.
    pub block_offsets: Vec<(usize, usize)>,
    pub block_widths: Vec<usize>,
}

pub fn stack(system: &SurSystem) -> StackedSystem {
    let n = system.n();
    let m = system.m();
    let mut y = DVector::zeros(n * m);
    let mut x = DMatrix::zeros(n * m, system.total_p());
    let mut block_offsets = Vec::with_capacity(m);
    let mut block_widths = Vec::with_capacity(m);
    for (i, eq) in system.equations().iter().enumerate() {
        let (r, c) = (i * n, system.offset(i));
        y.rows_mut(r, n).copy_from(&eq.response);
        x.view_mut((r, c), (n, eq.p())).copy_from(&eq.design);
        block_offsets.push((r, c));
        block_widths.push(eq.p());
    }
    StackedSystem {
        y,
        x,
        block_offsets,
        block_widths,
    }
}

impl StackedSystem {
    /// Rebuilds the per-equation system from the diagonal blocks.
    pub fn unstack(&self) -> Result<SurSystem> {
        let m = self.block_offsets.len();
        if m == 0 {
            return Err(SurError::InvalidInput("empty stacked system".into()));
        }
        let n = self.y.len() / m;
        let equations = self
            .block_offsets
            .iter()
            .zip(&self.block_widths)
            .map(|(&(r, c), &w)| {
                Equation::new(
                    self.y.rows(r, n).into_owned(),
                    self.x.view((r, c), (n, w)).into_owned(),
                )
            })
            .collect();
        SurSystem::new(equations)
    }
}

/// n x m residual matrix with a mask of filtered cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub values: DMatrix<f64>,
    /// `true` marks a cell that downstream consumers must ignore.
    pub mask: DMatrix<bool>,
}

impl ResidualMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), false);
        ResidualMatrix { values, mask }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Observed (unmasked) values of column `j`.
    pub fn observed_column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows())
            .filter(|&k| !self.mask[(k, j)])
            .map(|k| self.values[(k, j)])
            .collect()
    }
}

/// Residuals `y_i - X_i beta_i` for every equation, arranged n x m.
pub fn residuals(system: &SurSystem, beta: &DVector<f64>) -> Result<ResidualMatrix> {
    let fitted = system.fitted(beta)?;
    Ok(ResidualMatrix::new(system.response_matrix() - fitted))
}

/// The operator `Sigma (x) I_n` and its inverse on stacked vectors, applied
/// blockwise without forming the mn x mn matrix.
#[derive(Debug, Clone)]
pub struct KroneckerOmega {
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    n: usize,
}

impl KroneckerOmega {
    pub fn new(sigma: &DMatrix<f64>, n: usize) -> Result<Self> {
        if !sigma.is_square() {
            return Err(SurError::InvalidInput("sigma must be square".into()));
        }
        let chol = linalg::cholesky(sigma)?;
        Ok(KroneckerOmega {
            sigma: linalg::symmetrize(sigma),
            chol,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows() * self.n
    }

    fn as_columns(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.sigma.nrows(), v.as_slice())
    }

    /// `(Sigma (x) I_n) v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "vector length must be m * n");
        let out = self.as_columns(v) * &self.sigma;
        DVector::from_column_slice(out.as_slice())
    }

    /// `(Sigma^-1 (x) I_n) v`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "vector length must be m * n");
        // V Sigma^-1 = (Sigma^-1 V^T)^T
        let vt = self.as_columns(v).transpose();
        let out = self.chol.solve(&vt).transpose();
        DVector::from_column_slice(out.as_slice())
    }
}
