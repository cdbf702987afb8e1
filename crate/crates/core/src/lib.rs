// Indexed loops are clearer than iterator chains in most of this numerical
// code, and negated comparisons are deliberate NaN guards.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Functional causal survival analysis.
//!
//! This crate estimates the causal effect curve of a functional treatment
//! (a curve observed on a shared grid) on a right-censored survival outcome.
//! The pieces:
//!
//! - [`fpca`]: functional principal component analysis: truncated
//!   Karhunen–Loève decomposition of the treatment sample, score projection,
//!   and standardization.
//! - [`survival`]: Kaplan–Meier estimation on AFT residuals and conditional
//!   expectation imputation of censored log event times (Buckley–James).
//! - [`faft`]: iterative least-squares estimation of the functional
//!   accelerated failure time model, with optional balancing weights and a
//!   pairs bootstrap for standard errors.
//! - [`weights`]: functional propensity-score weights, parametric
//!   (Gaussian density ratio) and nonparametric (penalized empirical
//!   likelihood balancing), plus covariate balance diagnostics.
//! - [`causal`]: the confounding-adjustment estimators: naive, regression
//!   adjustment, FIPW, and double robust.
//! - [`sim`]: the two-scenario simulation design, censoring calibration,
//!   accuracy metrics, and the replication study runner.
//! - [`io`]: CSV/JSON ingestion and export used by the CLI.

pub mod causal;
pub mod error;
pub mod faft;
pub mod fpca;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod sim;
pub mod survival;
pub mod weights;

pub use error::{Error, Result};
