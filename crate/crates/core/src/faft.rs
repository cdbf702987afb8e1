//! Iterative least-squares estimation of the functional accelerated failure
//! time model with censoring imputation.
//!
//! Each iteration imputes censored log times by their conditional expectation
//! under the current parameters (Kaplan–Meier on residuals), then solves
//! centered normal equations. Balancing weights enter as case weights by
//! default (weighted centering and normal equations, unweighted
//! residuals/imputation); response scaling (regressing `w * Y^imputed`) is
//! available for sensitivity analysis.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{reconstruct_curve, FpcaBasis};
use crate::rng::stream_rng;
use crate::survival::{impute_outcomes, SurvivalSample};

/// How balancing weights enter the least-squares update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WeightMode {
    /// Weighted least squares with per-subject case weights.
    #[default]
    CaseWeights,
    /// Regress the weight-scaled imputed response on the centered design.
    ResponseScaling,
}

/// AFT parameters: intercept, score coefficients, covariate coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaftParams {
    pub alpha: f64,
    pub beta_scores: DVector<f64>,
    pub gamma: DVector<f64>,
}

impl FaftParams {
    pub fn new(alpha: f64, beta_scores: DVector<f64>, gamma: DVector<f64>) -> Self {
        Self {
            alpha,
            beta_scores,
            gamma,
        }
    }

    pub fn n_params(&self) -> usize {
        1 + self.beta_scores.len() + self.gamma.len()
    }

    /// Flat vector (alpha, beta..., gamma...).
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_params());
        v[0] = self.alpha;
        for (i, b) in self.beta_scores.iter().enumerate() {
            v[1 + i] = *b;
        }
        let off = 1 + self.beta_scores.len();
        for (i, g) in self.gamma.iter().enumerate() {
            v[off + i] = *g;
        }
        v
    }

    fn from_slope(alpha: f64, slope: &DVector<f64>, n_score_cols: usize) -> Self {
        Self {
            alpha,
            beta_scores: slope.rows(0, n_score_cols).into_owned(),
            gamma: slope.rows(n_score_cols, slope.len() - n_score_cols).into_owned(),
        }
    }

    fn slope(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.beta_scores.len() + self.gamma.len());
        for (i, b) in self.beta_scores.iter().enumerate() {
            v[i] = *b;
        }
        for (i, g) in self.gamma.iter().enumerate() {
            v[self.beta_scores.len() + i] = *g;
        }
        v
    }

    /// alpha + D theta for every row of the design.
    pub fn linear_predictor(&self, design: &DMatrix<f64>) -> Result<DVector<f64>> {
        let q = self.beta_scores.len() + self.gamma.len();
        if design.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "design has {} columns, parameters expect {q}",
                design.ncols()
            )));
        }
        let mut lp = design * self.slope();
        lp.add_scalar_mut(self.alpha);
        Ok(lp)
    }

    fn sup_distance(&self, other: &FaftParams) -> f64 {
        let a = self.to_vector();
        let b = other.to_vector();
        (a - b).amax()
    }
}

/// Iteration controls for [`fit_faft`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaftOptions {
    /// Sup-norm step tolerance for convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub weight_mode: WeightMode,
}

impl Default for FaftOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            weight_mode: WeightMode::CaseWeights,
        }
    }
}

/// Fitted model with convergence metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaftFit {
    pub params: FaftParams,
    /// Recovered coefficient curve on the basis grid (after [`recover_beta`]).
    pub beta_curve: Option<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub final_step_norm: f64,
    /// Sample SD of residuals at event times under the returned parameters.
    pub residual_scale: f64,
    pub se: Option<DVector<f64>>,
}

fn unit_weights(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

fn weighted_ls(
    design: &DMatrix<f64>,
    response: &[f64],
    case_weights: &[f64],
    n_score_cols: usize,
) -> Result<FaftParams> {
    let n = design.nrows();
    let q = design.ncols();
    let wsum: f64 = case_weights.iter().sum();
    let mut d_bar = DVector::zeros(q);
    for i in 0..n {
        for j in 0..q {
            d_bar[j] += case_weights[i] * design[(i, j)];
        }
    }
    d_bar /= wsum;
    let y_bar = response
        .iter()
        .zip(case_weights)
        .map(|(y, w)| w * y)
        .sum::<f64>()
        / wsum;

    let mut gram = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for i in 0..n {
        let w = case_weights[i];
        let yc = response[i] - y_bar;
        for j in 0..q {
            let dj = design[(i, j)] - d_bar[j];
            rhs[j] += w * dj * yc;
            for l in j..q {
                gram[(j, l)] += w * dj * (design[(i, l)] - d_bar[l]);
            }
        }
    }
    for j in 0..q {
        for l in 0..j {
            gram[(j, l)] = gram[(l, j)];
        }
    }
    let slope = crate::linalg::solve_spd(&gram, &rhs, "collinear design")?;
    let alpha = y_bar - slope.dot(&d_bar);
    Ok(FaftParams::from_slope(alpha, &slope, n_score_cols))
}

/// One least-squares update of the censoring-imputation iteration.
///
/// Imputes responses under `theta`, then solves the centered (weighted)
/// normal equations. The returned parameters are the next iterate.
pub fn ls_update(
    theta: &FaftParams,
    design: &DMatrix<f64>,
    n_score_cols: usize,
    sample: &SurvivalSample,
    weights: Option<&[f64]>,
    mode: WeightMode,
) -> Result<FaftParams> {
    let n = sample.n();
    if design.nrows() != n {
        return Err(Error::DimensionMismatch(
            "design rows do not match sample size".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch("weights length".into()));
        }
    }
    let imputed = impute_outcomes(theta, design, sample)?;
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = unit_weights(n);
            &ones
        }
    };
    match mode {
        WeightMode::CaseWeights => weighted_ls(design, &imputed, w, n_score_cols),
        WeightMode::ResponseScaling => {
            let scaled: Vec<f64> = imputed.iter().zip(w).map(|(y, wi)| wi * y).collect();
            weighted_ls(design, &scaled, &unit_weights(n), n_score_cols)
        }
    }
}

/// Fit the (weighted) functional AFT model by iterating [`ls_update`] from a
/// least-squares initializer on the observed log times.
///
/// Stops when the sup-norm parameter step falls below `options.tol`, a cycle
/// of iterates repeats (the cycle average is returned, unconverged), or
/// `options.max_iter` is reached (the iterate with the smallest step is
/// returned, unconverged).
pub fn fit_faft(
    design: &DMatrix<f64>,
    n_score_cols: usize,
    sample: &SurvivalSample,
    options: &FaftOptions,
    weights: Option<&[f64]>,
) -> Result<FaftFit> {
    if options.max_iter < 1 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    let n = sample.n();
    if design.nrows() != n {
        return Err(Error::DimensionMismatch(
            "design rows do not match sample size".into(),
        ));
    }
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = unit_weights(n);
            &ones
        }
    };

    // Initializer: least squares on the observed log times, censored values
    // used as-is, with the same weight mode as the iteration.
    let mut theta = match options.weight_mode {
        WeightMode::CaseWeights => weighted_ls(design, sample.log_time(), w, n_score_cols)?,
        WeightMode::ResponseScaling => {
            let scaled: Vec<f64> = sample
                .log_time()
                .iter()
                .zip(w)
                .map(|(y, wi)| wi * y)
                .collect();
            weighted_ls(design, &scaled, &unit_weights(n), n_score_cols)?
        }
    };

    let mut history: Vec<FaftParams> = vec![theta.clone()];
    let mut best = theta.clone();
    let mut best_step = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut final_step = f64::INFINITY;

    for m in 1..=options.max_iter {
        let next = ls_update(&theta, design, n_score_cols, sample, weights, options.weight_mode)?;
        let step = next.sup_distance(&theta);
        iterations = m;
        final_step = step;
        if step < best_step {
            best_step = step;
            best = next.clone();
        }
        if step <= options.tol {
            theta = next;
            converged = true;
            break;
        }
        // cycle guard: a repeat of an earlier iterate (not the immediate
        // predecessor) means the map oscillates; return the cycle average.
        if let Some(j) = history[..history.len().saturating_sub(1)]
            .iter()
            .position(|old| next.sup_distance(old) <= options.tol)
        {
            let cycle: Vec<&FaftParams> = history[j..].iter().collect();
            let len = cycle.len() as f64;
            let mut avg = cycle[0].to_vector();
            for p in &cycle[1..] {
                avg += p.to_vector();
            }
            avg /= len;
            let k = n_score_cols;
            let q = design.ncols();
            theta = FaftParams::new(
                avg[0],
                avg.rows(1, k).into_owned(),
                avg.rows(1 + k, q - k).into_owned(),
            );
            converged = false;
            final_step = step;
            break;
        }
        history.push(next.clone());
        theta = next;
        if m == options.max_iter {
            theta = best.clone();
            final_step = best_step;
        }
    }

    let lp = theta.linear_predictor(design)?;
    let mut ev = Vec::new();
    for i in 0..n {
        if sample.delta()[i] {
            ev.push(sample.log_time()[i] - lp[i]);
        }
    }
    let residual_scale = if ev.len() > 1 {
        let mean = ev.iter().sum::<f64>() / ev.len() as f64;
        (ev.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ev.len() - 1) as f64).sqrt()
    } else {
        0.0
    };

    Ok(FaftFit {
        params: theta,
        beta_curve: None,
        iterations,
        converged,
        final_step_norm: final_step,
        residual_scale,
        se: None,
    })
}

/// Recover the coefficient curve from the fitted score coefficients and store
/// it on the fit.
pub fn recover_beta(fit: &mut FaftFit, basis: &FpcaBasis) -> Result<DVector<f64>> {
    let curve = reconstruct_curve(&fit.params.beta_scores, basis)?;
    fit.beta_curve = Some(curve.clone());
    Ok(curve)
}

/// Nonparametric pairs-bootstrap standard errors for the fitted parameters.
///
/// Refits on `b_reps` resampled-with-replacement datasets; resamples without
/// events are redrawn (up to 10 attempts). Deterministic given `seed` and
/// independent of the parallel schedule.
pub fn bootstrap_se(
    design: &DMatrix<f64>,
    n_score_cols: usize,
    sample: &SurvivalSample,
    options: &FaftOptions,
    weights: Option<&[f64]>,
    b_reps: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    if b_reps < 50 {
        return Err(Error::InvalidInput("bootstrap needs B >= 50".into()));
    }
    let n = sample.n();
    let draws: Vec<Result<DVector<f64>>> = (0..b_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, &[0xB007, b as u64]);
            use rand::Rng;
            let mut rows: Vec<usize> = Vec::with_capacity(n);
            let mut attempt = 0;
            loop {
                rows.clear();
                for _ in 0..n {
                    rows.push(rng.gen_range(0..n));
                }
                if rows.iter().any(|&i| sample.delta()[i]) {
                    break;
                }
                attempt += 1;
                if attempt >= 10 {
                    return Err(Error::BootstrapNoEvents { attempts: attempt });
                }
            }
            let mut d = DMatrix::zeros(n, design.ncols());
            for (r, &i) in rows.iter().enumerate() {
                d.set_row(r, &design.row(i));
            }
            let s = sample.subset(&rows)?;
            let w: Option<Vec<f64>> = weights.map(|w| rows.iter().map(|&i| w[i]).collect());
            let fit = fit_faft(&d, n_score_cols, &s, options, w.as_deref())?;
            Ok(fit.params.to_vector())
        })
        .collect();

    let mut mat = Vec::with_capacity(b_reps);
    for d in draws {
        mat.push(d?);
    }
    let p = mat[0].len();
    let bf = b_reps as f64;
    let mut se = DVector::zeros(p);
    for j in 0..p {
        let mean = mat.iter().map(|v| v[j]).sum::<f64>() / bf;
        let var = mat.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (bf - 1.0);
        se[j] = var.sqrt();
    }
    Ok(se)
}
