//! Dynamic tensor recommender system.
//!
//! Fits a low-rank CP factorization with time-varying coefficients to a
//! sparse tensor-valued function of time. Each observed entry is modeled as
//!
//! ```text
//! y[i1,..,id](t) = sum_j h_j(t) * p1[i1,j] * .. * pd[id,j]
//!                + g(t)   * q1[i1]   * .. * qd[id]   + noise
//! ```
//!
//! where the trend functions `h_j` and the subgroup trend `g` are splines,
//! the `p` factors are per-subject loadings, and the `q` factors are shared
//! within known subject subgroups. The subgroup term gives nontrivial
//! forecasts for cold-start subjects whose `p` rows were never observed.
//! `g` is itself piecewise over time subgroups (e.g. calendar periods), so
//! the second term is a seasonal baseline rather than a single global curve.
//!
//! The crate provides:
//!
//! - [`tensor`]: sparse temporal tensor storage, subgroup schemes, long-CSV
//!   ingestion and export;
//! - [`spline`]: truncated-polynomial spline bases with data-driven knots;
//! - [`correlation`]: working correlation structures (independence,
//!   exchangeable, AR-1), whitening transforms, nuisance estimation;
//! - [`model`]: the parameter container, pointwise prediction, and the
//!   penalized weighted least-squares objective;
//! - [`solver`]: block coordinate descent with maximum-block-improvement
//!   acceptance, plus validation-based ridge tuning;
//! - [`inference`]: sandwich covariance of the spline coefficients and
//!   prediction intervals;
//! - [`simulate`]: a synthetic-data generator with known ground truth;
//! - [`evaluate`]: forecast metrics and a replication harness;
//! - [`pipeline`]: the end-to-end fit orchestration used by the CLI;
//! - [`serialize`]: stable on-disk JSON formats for models and schemas.

pub mod correlation;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod serialize;
pub mod simulate;
pub mod solver;
pub mod spline;
pub mod tensor;

pub use error::{Error, Result};
