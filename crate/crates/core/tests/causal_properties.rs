//! Estimator-level properties: no-confounding agreement, consistency under
//! the null, and the weighted-pseudo-sample identity against a
//! marginalization-integral oracle.

mod common;

use fcsurv::causal::{prepare, CausalConfig, CausalDataset, EstimatorSpec, WeightSpec};
use fcsurv::fpca::{inner_product, FunctionalSample};
use fcsurv::rng::{derive_seed, stream_rng};
use fcsurv::sim::{metrics::rmse_beta, true_beta};
use fcsurv::survival::SurvivalSample;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

fn uniform_grid(m: usize) -> Vec<f64> {
    (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
}

/// Scenario-shaped treatment with covariates independent of everything.
fn no_confounding_dataset(n: usize, seed: u64, null_effect: bool) -> CausalDataset {
    let grid = uniform_grid(101);
    let mut rng = stream_rng(seed, &[61]);
    let scales = [4.0, 12f64.sqrt(), 8f64.sqrt(), 2.0, 1.0, 0.5f64.sqrt()];
    let mut values = DMatrix::zeros(n, grid.len());
    let mut z = DMatrix::zeros(n, 3);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut int_bx = 0.0;
        for (k, &c) in scales.iter().enumerate() {
            let a: f64 = c * rng.sample::<f64, _>(StandardNormal);
            let freq = (k / 2 + 1) as f64;
            for (j, &s) in grid.iter().enumerate() {
                let phi = if k % 2 == 0 {
                    (2.0 * std::f64::consts::PI * freq * s).sin()
                } else {
                    (2.0 * std::f64::consts::PI * freq * s).cos()
                };
                values[(i, j)] += a * phi;
            }
            let beta_k = match k {
                0 => 1.0,
                1 => 0.5,
                2 | 3 => 0.25,
                _ => 0.0,
            };
            int_bx += beta_k * a;
        }
        for j in 0..3 {
            z[(i, j)] = rng.sample(StandardNormal);
        }
        let effect = if null_effect { 0.0 } else { int_bx };
        y.push(1.0 + effect + 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    CausalDataset::new(
        FunctionalSample::new(grid, values).unwrap(),
        z,
        SurvivalSample::from_log_times(y, vec![true; n]).unwrap(),
        CausalConfig::default(),
    )
    .unwrap()
}

#[test]
fn naive_consistent_without_confounding() {
    let data = no_confounding_dataset(2000, 7, false);
    let est = fcsurv::causal::estimate_naive(&data).unwrap();
    let grid = data.treatment.grid();
    let truth: Vec<f64> = grid.iter().map(|&s| true_beta(s)).collect();
    let curve: Vec<f64> = est.beta_curve.iter().copied().collect();
    let r = rmse_beta(&curve, &truth, grid).unwrap();
    assert!(r <= 0.02, "naive RMSE without confounding: {r}");
}

#[test]
fn null_effect_recovers_zero_curve() {
    let data = no_confounding_dataset(2000, 8, true);
    let est = fcsurv::causal::estimate_naive(&data).unwrap();
    let grid = data.treatment.grid();
    let curve: Vec<f64> = est.beta_curve.iter().copied().collect();
    let energy = inner_product(&curve, &curve, grid).unwrap();
    assert!(energy <= 0.05, "null-effect curve energy: {energy}");
}

#[test]
fn estimators_agree_without_confounding() {
    // average pairwise L2 distance across replications
    let reps = 50;
    let pair_count = 15; // six estimators
    let sums: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = no_confounding_dataset(2000, derive_seed(0x2221, &[rep as u64]), false);
            let prep = prepare(&data).unwrap();
            let rho = 0.01 / data.n() as f64;
            let curves: Vec<Vec<f64>> = vec![
                prep.naive().unwrap(),
                prep.reg_adjust().unwrap(),
                prep.fipw(WeightSpec::Parametric).unwrap(),
                prep.fipw(WeightSpec::Nonparametric(rho)).unwrap(),
                prep.double_robust(WeightSpec::Parametric).unwrap(),
                prep.double_robust(WeightSpec::Nonparametric(rho)).unwrap(),
            ]
            .into_iter()
            .map(|e| e.beta_curve.iter().copied().collect())
            .collect();
            let grid = data.treatment.grid();
            let mut dists = Vec::new();
            for i in 0..curves.len() {
                for j in i + 1..curves.len() {
                    let diff: Vec<f64> = curves[i]
                        .iter()
                        .zip(&curves[j])
                        .map(|(a, b)| a - b)
                        .collect();
                    dists.push(inner_product(&diff, &diff, grid).unwrap().sqrt());
                }
            }
            dists.iter().sum::<f64>()
        })
        .collect();
    let total: f64 = sums.iter().sum();
    let mean_pairwise = total / (reps * pair_count) as f64;
    assert!(
        mean_pairwise <= 0.1,
        "mean pairwise L2 distance {mean_pairwise}"
    );
}

/// With the analytic density-ratio weights on a span-exact
/// single-component treatment, the weighted fit recovers the slope of the
/// marginalization integral.
#[test]
fn weighted_fit_matches_marginalization_integral() {
    let (fitted, oracle) = common::marginalization_toy_slopes(1);
    assert!(
        (fitted - oracle).abs() <= 0.05,
        "weighted slope {fitted} vs marginalization oracle {oracle}"
    );
}

#[test]
fn pipeline_bootstrap_is_deterministic() {
    let data = no_confounding_dataset(90, 21, false);
    let spec = EstimatorSpec::Naive;
    let a = fcsurv::causal::bootstrap_se(&data, spec, 60, 5).unwrap();
    let b = fcsurv::causal::bootstrap_se(&data, spec, 60, 5).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
}
