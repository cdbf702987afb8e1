//! Confounding-adjusted estimators of the functional causal effect curve.
//!
//! Four estimators share the same FPCA artifacts:
//!
//! - naive: AFT of the outcome on the FPC scores alone;
//! - regression adjustment: full conditional AFT, confounder contribution
//!   averaged out, refit on the adjusted responses;
//! - FIPW: weighted AFT on the scores, weights from the propensity module;
//! - double robust: regression-adjusted responses corrected by weighted
//!   imputation residuals, refit on the scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faft::{fit_faft, recover_beta, FaftFit, FaftOptions};
use crate::fpca::{
    estimate_fpca, standardize_covariates, standardize_scores, FpcaBasis, FunctionalSample,
};
use crate::survival::{impute_outcomes, SurvivalSample};
use crate::weights::{fit_nonparametric_weights, fit_parametric_weights, WeightSet};

/// Estimator identity, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMethod {
    Naive,
    RegAdjust,
    Fipw,
    DoubleRobust,
}

/// Which weight construction an estimator should use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightSpec {
    Parametric,
    /// Penalty parameter rho for the balancing weights.
    Nonparametric(f64),
}

/// Analysis configuration shared by the estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CausalConfig {
    /// PVE target for the outcome-model basis (K).
    pub pve_outcome: f64,
    /// PVE target for the weight-model basis (K*).
    pub pve_weights: f64,
    pub faft: FaftOptions,
    /// Optional winsorization quantile for fitted weights (sensitivity
    /// analysis; none by default).
    pub clip_weights: Option<f64>,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            pve_outcome: 0.95,
            pve_weights: 0.95,
            faft: FaftOptions::default(),
            clip_weights: None,
        }
    }
}

/// One observational dataset: functional treatment, scalar covariates,
/// right-censored survival outcome.
#[derive(Debug, Clone)]
pub struct CausalDataset {
    pub treatment: FunctionalSample,
    pub covariates: DMatrix<f64>,
    pub survival: SurvivalSample,
    pub config: CausalConfig,
}

impl CausalDataset {
    pub fn new(
        treatment: FunctionalSample,
        covariates: DMatrix<f64>,
        survival: SurvivalSample,
        config: CausalConfig,
    ) -> Result<Self> {
        let n = treatment.n();
        if covariates.nrows() != n || survival.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "row counts disagree: treatment {n}, covariates {}, survival {}",
                covariates.nrows(),
                survival.n()
            )));
        }
        Ok(Self {
            treatment,
            covariates,
            survival,
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.treatment.n()
    }
}

/// A fitted causal estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub method: CausalMethod,
    pub weight_method: Option<WeightSpec>,
    /// Recovered coefficient curve on the treatment grid.
    pub beta_curve: DVector<f64>,
    pub fit: FaftFit,
    pub weights: Option<WeightSet>,
}

/// Shared FPCA artifacts for one dataset, so the estimators can run
/// concurrently without repeating the eigendecomposition.
pub struct PreparedDataset<'a> {
    pub data: &'a CausalDataset,
    pub basis: FpcaBasis,
    /// n x K outcome-model scores.
    pub scores: DMatrix<f64>,
    pub basis_weights: FpcaBasis,
    /// n x K* standardized scores for the weight model.
    pub a_star: DMatrix<f64>,
    /// n x p standardized covariates.
    pub z_star: DMatrix<f64>,
}

/// Compute the FPCA artifacts for the outcome (PVE K) and weight (PVE K*)
/// models plus standardized covariates.
pub fn prepare(data: &CausalDataset) -> Result<PreparedDataset<'_>> {
    let (basis, score_mat) = estimate_fpca(&data.treatment, data.config.pve_outcome)?;
    let (basis_weights, w_scores) = if data.config.pve_weights == data.config.pve_outcome {
        (basis.clone(), score_mat.clone())
    } else {
        estimate_fpca(&data.treatment, data.config.pve_weights)?
    };
    let std_scores = standardize_scores(&w_scores, &basis_weights)?;
    // balancing constraints need zero in the interior of the covariate hull,
    // so the columns are centered before second-moment whitening (binary
    // covariates are infeasible to balance in a nonnegative coding)
    let mut z_centered = data.covariates.clone();
    let z_means = crate::linalg::column_means(&z_centered);
    for i in 0..z_centered.nrows() {
        for j in 0..z_centered.ncols() {
            z_centered[(i, j)] -= z_means[j];
        }
    }
    let z_star = standardize_covariates(&z_centered)?.z_star;
    Ok(PreparedDataset {
        data,
        basis,
        scores: score_mat.scores,
        basis_weights,
        a_star: std_scores.standardized.expect("filled by standardize_scores"),
        z_star,
    })
}

/// Adjusted responses of the regression-adjustment step:
/// `alpha + A beta + mean_j(gamma' Z_j)` for each subject.
fn adjusted_responses(full_fit: &FaftFit, scores: &DMatrix<f64>, covariates: &DMatrix<f64>) -> Vec<f64> {
    let n = scores.nrows();
    let gamma_term = {
        let per_subject = covariates * &full_fit.params.gamma;
        per_subject.sum() / n as f64
    };
    let base = scores * &full_fit.params.beta_scores;
    (0..n)
        .map(|i| full_fit.params.alpha + base[i] + gamma_term)
        .collect()
}

/// Double-robust pseudo outcomes: `y_hat + w * (y_imputed - y_hat)`.
pub fn dr_responses(y_regadj: &[f64], y_imputed: &[f64], w: &[f64]) -> Vec<f64> {
    y_regadj
        .iter()
        .zip(y_imputed)
        .zip(w)
        .map(|((&yh, &yi), &wi)| yh + wi * (yi - yh))
        .collect()
}

impl<'a> PreparedDataset<'a> {
    fn k(&self) -> usize {
        self.basis.k()
    }

    fn fit_on_scores(&self, responses: &SurvivalSample, weights: Option<&[f64]>) -> Result<FaftFit> {
        fit_faft(
            &self.scores,
            self.k(),
            responses,
            &self.data.config.faft,
            weights,
        )
    }

    fn full_design(&self) -> DMatrix<f64> {
        let n = self.scores.nrows();
        let k = self.k();
        let p = self.data.covariates.ncols();
        let mut d = DMatrix::zeros(n, k + p);
        for i in 0..n {
            for j in 0..k {
                d[(i, j)] = self.scores[(i, j)];
            }
            for j in 0..p {
                d[(i, k + j)] = self.data.covariates[(i, j)];
            }
        }
        d
    }

    fn fit_weights(&self, spec: WeightSpec) -> Result<WeightSet> {
        let set = match spec {
            WeightSpec::Parametric => fit_parametric_weights(&self.a_star, &self.z_star)?.1,
            WeightSpec::Nonparametric(rho) => {
                fit_nonparametric_weights(&self.a_star, &self.z_star, rho)?
            }
        };
        Ok(match self.data.config.clip_weights {
            Some(q) => set.clipped(q, &self.a_star, &self.z_star),
            None => set,
        })
    }

    /// AFT of the outcome on the scores only, no confounding adjustment.
    pub fn naive(&self) -> Result<CausalEstimate> {
        let mut fit = self.fit_on_scores(&self.data.survival, None)?;
        let beta_curve = recover_beta(&mut fit, &self.basis)?;
        Ok(CausalEstimate {
            method: CausalMethod::Naive,
            weight_method: None,
            beta_curve,
            fit,
            weights: None,
        })
    }

    /// Full conditional fit plus the adjusted responses it induces.
    fn reg_adjust_parts(&self) -> Result<(FaftFit, Vec<f64>, FaftFit)> {
        let design = self.full_design();
        let full_fit = fit_faft(
            &design,
            self.k(),
            &self.data.survival,
            &self.data.config.faft,
            None,
        )?;
        let y_hat = adjusted_responses(&full_fit, &self.scores, &self.data.covariates);
        // Adjusted responses are deterministic fitted quantities: refit with
        // every subject treated as an event.
        let refit_sample = SurvivalSample::from_log_times(y_hat.clone(), vec![true; y_hat.len()])?;
        let refit = self.fit_on_scores(&refit_sample, None)?;
        Ok((full_fit, y_hat, refit))
    }

    /// Regression-adjustment estimator.
    pub fn reg_adjust(&self) -> Result<CausalEstimate> {
        let (_, _, mut refit) = self.reg_adjust_parts()?;
        let beta_curve = recover_beta(&mut refit, &self.basis)?;
        Ok(CausalEstimate {
            method: CausalMethod::RegAdjust,
            weight_method: None,
            beta_curve,
            fit: refit,
            weights: None,
        })
    }

    /// FIPW estimator with freshly fitted weights.
    pub fn fipw(&self, spec: WeightSpec) -> Result<CausalEstimate> {
        let set = self.fit_weights(spec)?;
        let mut est = self.fipw_with_weights(set)?;
        est.weight_method = Some(spec);
        Ok(est)
    }

    /// FIPW estimator with externally supplied weights.
    pub fn fipw_with_weights(&self, set: WeightSet) -> Result<CausalEstimate> {
        let mut fit = self.fit_on_scores(&self.data.survival, Some(&set.weights))?;
        let beta_curve = recover_beta(&mut fit, &self.basis)?;
        Ok(CausalEstimate {
            method: CausalMethod::Fipw,
            weight_method: None,
            beta_curve,
            fit,
            weights: Some(set),
        })
    }

    /// Double robust estimator with freshly fitted weights.
    pub fn double_robust(&self, spec: WeightSpec) -> Result<CausalEstimate> {
        let set = self.fit_weights(spec)?;
        let mut est = self.double_robust_with_weights(set)?;
        est.weight_method = Some(spec);
        Ok(est)
    }

    /// Double robust estimator with externally supplied weights.
    pub fn double_robust_with_weights(&self, set: WeightSet) -> Result<CausalEstimate> {
        let (full_fit, y_hat, _) = self.reg_adjust_parts()?;
        let design = self.full_design();
        let y_imputed = impute_outcomes(&full_fit.params, &design, &self.data.survival)?;
        let y_tilde = dr_responses(&y_hat, &y_imputed, &set.weights);
        let refit_sample = SurvivalSample::from_log_times(y_tilde, vec![true; self.data.n()])?;
        let mut fit = self.fit_on_scores(&refit_sample, None)?;
        let beta_curve = recover_beta(&mut fit, &self.basis)?;
        Ok(CausalEstimate {
            method: CausalMethod::DoubleRobust,
            weight_method: None,
            beta_curve,
            fit,
            weights: Some(set),
        })
    }
}

/// Estimator selector for pipeline-level operations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Naive,
    RegAdjust,
    Fipw(WeightSpec),
    DoubleRobust(WeightSpec),
}

impl EstimatorSpec {
    pub fn run(&self, prep: &PreparedDataset) -> Result<CausalEstimate> {
        match *self {
            EstimatorSpec::Naive => prep.naive(),
            EstimatorSpec::RegAdjust => prep.reg_adjust(),
            EstimatorSpec::Fipw(w) => prep.fipw(w),
            EstimatorSpec::DoubleRobust(w) => prep.double_robust(w),
        }
    }
}

/// Pairs bootstrap over the whole estimation pipeline: resample subjects,
/// rerun the estimator, and return the per-parameter standard deviations of
/// the final-stage coefficients (intercept first, then score coefficients).
///
/// Resamples whose truncated basis size differs from the point estimate's
/// (or that have no events) are redrawn, at most ten times each.
pub fn bootstrap_se(
    data: &CausalDataset,
    spec: EstimatorSpec,
    b_reps: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    if b_reps < 50 {
        return Err(Error::InvalidInput("bootstrap needs B >= 50".into()));
    }
    let point = spec.run(&prepare(data)?)?;
    let k = point.fit.params.beta_scores.len();
    let n = data.n();
    use rayon::prelude::*;
    let draws: Vec<Result<Vec<f64>>> = (0..b_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = crate::rng::stream_rng(seed, &[0xCB07, b as u64]);
            use rand::Rng;
            for attempt in 0..10 {
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                if !rows.iter().any(|&i| data.survival.delta()[i]) {
                    continue;
                }
                let treatment = data.treatment.subset(&rows);
                let mut z = DMatrix::zeros(n, data.covariates.ncols());
                for (r, &i) in rows.iter().enumerate() {
                    for j in 0..z.ncols() {
                        z[(r, j)] = data.covariates[(i, j)];
                    }
                }
                let survival = data.survival.subset(&rows)?;
                let resampled = CausalDataset::new(treatment, z, survival, data.config)?;
                let est = spec.run(&prepare(&resampled)?)?;
                if est.fit.params.beta_scores.len() != k {
                    if attempt == 9 {
                        return Err(Error::InvalidInput(
                            "bootstrap basis size kept diverging from the point estimate".into(),
                        ));
                    }
                    continue;
                }
                let mut v = vec![est.fit.params.alpha];
                v.extend(est.fit.params.beta_scores.iter());
                return Ok(v);
            }
            Err(Error::BootstrapNoEvents { attempts: 10 })
        })
        .collect();
    let mut mat = Vec::with_capacity(b_reps);
    for d in draws {
        mat.push(d?);
    }
    let p = 1 + k;
    let bf = b_reps as f64;
    let mut se = DVector::zeros(p);
    for j in 0..p {
        let mean = mat.iter().map(|v| v[j]).sum::<f64>() / bf;
        let var = mat.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (bf - 1.0);
        se[j] = var.sqrt();
    }
    Ok(se)
}

/// Naive estimator on a raw dataset.
pub fn estimate_naive(data: &CausalDataset) -> Result<CausalEstimate> {
    prepare(data)?.naive()
}

/// Regression-adjustment estimator on a raw dataset.
pub fn estimate_reg_adjust(data: &CausalDataset) -> Result<CausalEstimate> {
    prepare(data)?.reg_adjust()
}

/// FIPW estimator on a raw dataset.
pub fn estimate_fipw(data: &CausalDataset, spec: WeightSpec) -> Result<CausalEstimate> {
    prepare(data)?.fipw(spec)
}

/// Double robust estimator on a raw dataset.
pub fn estimate_double_robust(data: &CausalDataset, spec: WeightSpec) -> Result<CausalEstimate> {
    prepare(data)?.double_robust(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{balance_diagnostics, CovariateKind, WeightMethod};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit_weight_set(n: usize, a_star: &DMatrix<f64>, z_star: &DMatrix<f64>) -> WeightSet {
        let w = vec![1.0; n];
        let kinds = vec![CovariateKind::Continuous; z_star.ncols()];
        WeightSet {
            diagnostics: balance_diagnostics(&w, a_star, z_star, &kinds).unwrap(),
            weights: w,
            method: WeightMethod::Parametric,
            rho: None,
            gamma_slack: None,
        }
    }

    fn small_dataset(n: usize, seed: u64, censor: bool) -> CausalDataset {
        let mut rng = crate::rng::stream_rng(seed, &[51]);
        let grid: Vec<f64> = (0..41).map(|i| i as f64 / 40.0).collect();
        let mut vals = DMatrix::zeros(n, grid.len());
        let mut z = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        for i in 0..n {
            let a1: f64 = rng.sample(StandardNormal);
            let a2: f64 = rng.sample(StandardNormal);
            for (j, s) in grid.iter().enumerate() {
                vals[(i, j)] = 2.0 * a1 * (2.0 * std::f64::consts::PI * s).sin()
                    + a2 * (2.0 * std::f64::consts::PI * s).cos();
            }
            z[(i, 0)] = a1 + 0.5 * rng.sample::<f64, _>(StandardNormal);
            z[(i, 1)] = rng.sample(StandardNormal);
            let yt = 1.0 + a1 + 0.5 * a2 + 1.5 * z[(i, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal);
            if censor && rng.gen_bool(0.3) {
                y.push(yt - rng.gen_range(0.0..0.5));
                delta.push(false);
            } else {
                y.push(yt);
                delta.push(true);
            }
        }
        CausalDataset::new(
            FunctionalSample::new(grid, vals).unwrap(),
            z,
            SurvivalSample::from_log_times(y, delta).unwrap(),
            CausalConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn fipw_with_unit_weights_equals_naive_exactly() {
        let data = small_dataset(120, 1, true);
        let prep = prepare(&data).unwrap();
        let naive = prep.naive().unwrap();
        let set = unit_weight_set(data.n(), &prep.a_star, &prep.z_star);
        let fipw = prep.fipw_with_weights(set).unwrap();
        assert_eq!(
            naive.fit.params.alpha.to_bits(),
            fipw.fit.params.alpha.to_bits()
        );
        for (a, b) in naive
            .fit
            .params
            .beta_scores
            .iter()
            .zip(fipw.fit.params.beta_scores.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(naive.beta_curve, fipw.beta_curve);
    }

    #[test]
    fn dr_with_unit_weights_equals_naive_on_imputed() {
        let data = small_dataset(100, 2, true);
        let prep = prepare(&data).unwrap();
        let set = unit_weight_set(data.n(), &prep.a_star, &prep.z_star);
        let dr = prep.double_robust_with_weights(set).unwrap();
        // independent construction: impute at the full-model fit, then fit
        // the scores-only model on the imputed outcomes as events
        let (full_fit, _, _) = prep.reg_adjust_parts().unwrap();
        let y_imp = impute_outcomes(&full_fit.params, &prep.full_design(), &data.survival).unwrap();
        let sample = SurvivalSample::from_log_times(y_imp, vec![true; data.n()]).unwrap();
        let naive_imp = prep.fit_on_scores(&sample, None).unwrap();
        assert_eq!(
            dr.fit.params.alpha.to_bits(),
            naive_imp.params.alpha.to_bits()
        );
        for (a, b) in dr
            .fit
            .params
            .beta_scores
            .iter()
            .zip(naive_imp.params.beta_scores.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dr_responses_collapse_at_zero_residuals() {
        let y_hat = vec![1.0, -0.5, 2.25];
        let w = vec![3.0, 0.2, 1.4];
        let out = dr_responses(&y_hat, &y_hat, &w);
        assert_eq!(out, y_hat);
    }

    #[test]
    fn dr_equals_regadj_when_imputed_match_adjusted() {
        let data = small_dataset(90, 3, false);
        let prep = prepare(&data).unwrap();
        let (_, y_hat, refit) = prep.reg_adjust_parts().unwrap();
        // force zero residuals through the response constructor
        let w: Vec<f64> = (0..data.n()).map(|i| 0.5 + (i % 5) as f64).collect();
        let y_tilde = dr_responses(&y_hat, &y_hat, &w);
        let sample = SurvivalSample::from_log_times(y_tilde, vec![true; data.n()]).unwrap();
        let fit = prep.fit_on_scores(&sample, None).unwrap();
        assert_eq!(fit.params.alpha.to_bits(), refit.params.alpha.to_bits());
        for (a, b) in fit
            .params
            .beta_scores
            .iter()
            .zip(refit.params.beta_scores.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn regadj_with_zero_covariates_matches_full_model_scores() {
        // end-to-end run; the recovered curve must match the fitted score
        // coefficients through the basis
        let data = small_dataset(80, 4, true);
        let est = estimate_reg_adjust(&data).unwrap();
        let prep = prepare(&data).unwrap();
        let rec = crate::fpca::reconstruct_curve(&est.fit.params.beta_scores, &prep.basis).unwrap();
        assert!((est.beta_curve - rec).amax() <= 1e-12);
    }
}
