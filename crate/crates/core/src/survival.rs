//! Kaplan–Meier estimation on AFT residuals and conditional-expectation
//! imputation of right-censored log event times.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faft::FaftParams;

/// Observed survival data: event/censoring times and indicators.
///
/// `log_time` is the authoritative field for all estimation; `obs_time`
/// carries the original-scale times for I/O. Samples built from log times
/// may hold an `obs_time` that under- or overflowed `exp`; nothing
/// downstream reads it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalSample {
    obs_time: Vec<f64>,
    delta: Vec<bool>,
    log_time: Vec<f64>,
}

impl SurvivalSample {
    /// Build from original-scale observed times (must be strictly positive).
    pub fn from_times(obs_time: Vec<f64>, delta: Vec<bool>) -> Result<Self> {
        if obs_time.len() != delta.len() {
            return Err(Error::DimensionMismatch(
                "times and indicators differ in length".into(),
            ));
        }
        if obs_time.is_empty() {
            return Err(Error::InvalidInput("empty survival sample".into()));
        }
        if let Some(bad) = obs_time.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "obs_time must be positive and finite, got {bad}"
            )));
        }
        if !delta.iter().any(|&d| d) {
            return Err(Error::AllCensored);
        }
        let log_time = obs_time.iter().map(|t| t.ln()).collect();
        Ok(Self {
            obs_time,
            delta,
            log_time,
        })
    }

    /// Build from log-scale observed times.
    pub fn from_log_times(log_time: Vec<f64>, delta: Vec<bool>) -> Result<Self> {
        if log_time.len() != delta.len() {
            return Err(Error::DimensionMismatch(
                "times and indicators differ in length".into(),
            ));
        }
        if log_time.is_empty() {
            return Err(Error::InvalidInput("empty survival sample".into()));
        }
        if log_time.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("log times must be finite".into()));
        }
        if !delta.iter().any(|&d| d) {
            return Err(Error::AllCensored);
        }
        let obs_time = log_time.iter().map(|y| y.exp()).collect();
        Ok(Self {
            obs_time,
            delta,
            log_time,
        })
    }

    pub fn n(&self) -> usize {
        self.log_time.len()
    }

    pub fn obs_time(&self) -> &[f64] {
        &self.obs_time
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn log_time(&self) -> &[f64] {
        &self.log_time
    }

    pub fn n_events(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn all_events(&self) -> bool {
        self.delta.iter().all(|&d| d)
    }

    /// Sample restricted to the given rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let log_time: Vec<f64> = rows.iter().map(|&i| self.log_time[i]).collect();
        let delta: Vec<bool> = rows.iter().map(|&i| self.delta[i]).collect();
        if !delta.iter().any(|&d| d) {
            return Err(Error::AllCensored);
        }
        let obs_time = rows.iter().map(|&i| self.obs_time[i]).collect();
        Ok(Self {
            obs_time,
            delta,
            log_time,
        })
    }
}

/// Product-limit step CDF of AFT residuals.
#[derive(Debug, Clone)]
pub struct ResidualCdf {
    /// All n ordered residuals (events before censorings at ties).
    pub jump_points: Vec<f64>,
    /// CDF evaluated at each ordered point (nondecreasing, final value <= 1).
    pub cdf_values: Vec<f64>,
    /// Probability mass at each ordered point (zero at censored points).
    pub jump_masses: Vec<f64>,
    deltas: Vec<bool>,
}

impl ResidualCdf {
    /// Largest-residual-as-event correction so masses sum to one.
    ///
    /// Recomputes the product limit with the final ordered point forced to be
    /// an event. Idempotent.
    pub fn efron_corrected(&self) -> ResidualCdf {
        let mut deltas = self.deltas.clone();
        *deltas.last_mut().expect("nonempty") = true;
        product_limit(self.jump_points.clone(), deltas)
    }

    /// Total mass at jump points >= r (closed at r).
    fn tail_mass(&self, r: f64) -> f64 {
        self.jump_points
            .iter()
            .zip(&self.jump_masses)
            .filter(|(&p, _)| p >= r)
            .map(|(_, &m)| m)
            .sum()
    }

    /// Mass-weighted mean of jump points >= r.
    fn tail_sum(&self, r: f64) -> f64 {
        self.jump_points
            .iter()
            .zip(&self.jump_masses)
            .filter(|(&p, _)| p >= r)
            .map(|(&p, &m)| p * m)
            .sum()
    }
}

fn product_limit(sorted_residuals: Vec<f64>, sorted_deltas: Vec<bool>) -> ResidualCdf {
    let n = sorted_residuals.len();
    let mut cdf_values = Vec::with_capacity(n);
    let mut jump_masses = Vec::with_capacity(n);
    let mut survival = 1.0;
    for i in 0..n {
        let prev = survival;
        if sorted_deltas[i] {
            survival *= (n - i - 1) as f64 / (n - i) as f64;
        }
        jump_masses.push(prev - survival);
        cdf_values.push(1.0 - survival);
    }
    ResidualCdf {
        jump_points: sorted_residuals,
        cdf_values,
        jump_masses,
        deltas: sorted_deltas,
    }
}

/// Kaplan–Meier product-limit CDF of residuals under right censoring.
///
/// Residuals are sorted ascending with events preceding censorings at ties
/// (then input order), and the per-point product-limit formula is applied.
pub fn km_residual_cdf(residuals: &[f64], delta: &[bool]) -> Result<ResidualCdf> {
    if residuals.len() != delta.len() {
        return Err(Error::DimensionMismatch(
            "residuals and indicators differ in length".into(),
        ));
    }
    if residuals.is_empty() {
        return Err(Error::InvalidInput("no residuals".into()));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput("residuals must be finite".into()));
    }
    if !delta.iter().any(|&d| d) {
        return Err(Error::AllCensored);
    }
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    order.sort_by(|&a, &b| {
        residuals[a]
            .partial_cmp(&residuals[b])
            .expect("finite residuals")
            .then_with(|| delta[b].cmp(&delta[a])) // events (true) first
            .then(a.cmp(&b))
    });
    let sorted_res: Vec<f64> = order.iter().map(|&i| residuals[i]).collect();
    let sorted_del: Vec<bool> = order.iter().map(|&i| delta[i]).collect();
    Ok(product_limit(sorted_res, sorted_del))
}

/// Conditional tail expectation E[e | e >= r] under the tail-corrected CDF.
///
/// The Efron correction (largest residual treated as an event) is applied
/// first so total mass is one; the expectation is the mass-weighted mean of
/// jump points at or beyond `r`, normalized by `1 - F(r-)`.
pub fn conditional_tail_expectation(cdf: &ResidualCdf, r: f64) -> Result<f64> {
    let corrected = cdf.efron_corrected();
    let denom = corrected.tail_mass(r);
    if !(denom > 0.0) {
        return Err(Error::EmptyTail { at: r });
    }
    Ok(corrected.tail_sum(r) / denom)
}

/// Buckley–James imputation of censored log event times.
///
/// For censored subject i the response becomes
/// `theta' D_i + E[e | e >= r_i(theta)]` with `r_i = Y_i - theta' D_i`; the
/// residual CDF is estimated from all n residuals with their censoring
/// indicators. Uncensored responses are returned unchanged.
pub fn impute_outcomes(
    theta: &FaftParams,
    design: &DMatrix<f64>,
    sample: &SurvivalSample,
) -> Result<Vec<f64>> {
    let n = sample.n();
    if design.nrows() != n {
        return Err(Error::DimensionMismatch(
            "design rows do not match sample size".into(),
        ));
    }
    let lp = theta.linear_predictor(design)?;
    if sample.all_events() {
        return Ok(sample.log_time().to_vec());
    }
    let residuals: Vec<f64> = (0..n).map(|i| sample.log_time()[i] - lp[i]).collect();
    let cdf = km_residual_cdf(&residuals, sample.delta())?;
    let corrected = cdf.efron_corrected();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if sample.delta()[i] {
            out.push(sample.log_time()[i]);
        } else {
            let denom = corrected.tail_mass(residuals[i]);
            if !(denom > 0.0) {
                return Err(Error::EmptyTail { at: residuals[i] });
            }
            out.push(lp[i] + corrected.tail_sum(residuals[i]) / denom);
        }
    }
    Ok(out)
}
