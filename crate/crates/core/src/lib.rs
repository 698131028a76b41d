//! Robust estimation of seemingly unrelated regression (SUR) systems.
//!
//! Three system estimators are provided:
//!
//! * [`estimators::fit_sure`]: classical two-step feasible GLS.
//! * [`estimators::fit_surerob`]: equation-wise MM regression, bisquare cell
//!   weights and a cell-wise robust (two-step generalized S) error covariance
//!   feeding a weighted GLS step. Robust to both row-wise and cell-wise
//!   outliers.
//! * [`estimators::fit_fast_sur`]: the multivariate S-estimator of the SUR
//!   model computed with a Fast-S style subsampling algorithm.
//!
//! The [`simulation`] module generates contaminated Monte Carlo designs and
//! [`metrics`] holds the evaluation and inference summaries.

pub mod cellwise;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod regression;
pub mod seeds;
pub mod simulation;

pub use error::{Result, SurError};
pub use estimators::{fit, fit_fast_sur, fit_sure, fit_surerob, FastSurConfig, Method, SurFit, SurerobConfig, Weighting};
pub use loss::LossFamily;
pub use model::{Equation, ResidualMatrix, StackedSystem, SurSystem};
