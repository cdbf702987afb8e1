//! Shared fixtures for the integration suites: the small balancing-weight
//! instance and its independently coded dual objective.

#![allow(dead_code)]

pub const N12: usize = 12;
pub const A12: [f64; N12] = [
    -1.5, -1.0, -0.5, -0.2, 0.1, 0.3, 0.6, 0.9, 1.1, -0.8, 0.4, 0.62,
];
pub const Z12: [f64; N12] = [
    -1.2, -0.9, 0.2, -0.4, 0.5, -0.1, 0.8, 0.6, 1.3, -0.6, 0.1, -0.32,
];

/// Dual objective of the penalized balancing problem at multipliers
/// (a, b, eta), evaluated from scratch with its own bisection for the
/// normalization multiplier.
pub fn dual_value(a: f64, b: f64, eta: f64, rho: f64) -> f64 {
    let n = N12 as f64;
    let t: Vec<f64> = (0..N12)
        .map(|i| a * A12[i] + b * Z12[i] + eta * A12[i] * Z12[i] / n)
        .collect();
    let t_min = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = |mu: f64| t.iter().map(|ti| 1.0 / (mu + ti)).sum::<f64>() - n;
    let mut lo = -t_min + 1e-12;
    let mut hi = -t_min + 1.0;
    while h(hi) > 0.0 {
        hi = -t_min + 2.0 * (hi + t_min);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut v = mu * n - n;
    for ti in &t {
        v -= (mu + ti).ln();
    }
    v + 0.5 * rho * eta * eta
}

/// Primal objective of a weight vector on the small instance.
pub fn primal_value(w: &[f64], rho: f64) -> f64 {
    let n = N12 as f64;
    let gamma: f64 = (0..N12).map(|i| w[i] * A12[i] * Z12[i]).sum::<f64>() / n;
    w.iter().map(|x| x.ln()).sum::<f64>() - gamma * gamma / (2.0 * rho)
}

/// Minimum of the dual over a dense, iteratively refined grid.
pub fn dual_grid_minimum(rho: f64) -> f64 {
    let mut center = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut half_width: f64 = 4.0;
    let mut half_width_eta: f64 = 40.0;
    let mut best = f64::INFINITY;
    for _ in 0..10 {
        let mut arg = center;
        for ia in 0..21 {
            let av = center.0 - half_width + 2.0 * half_width * ia as f64 / 20.0;
            for ib in 0..21 {
                let bv = center.1 - half_width + 2.0 * half_width * ib as f64 / 20.0;
                for ie in 0..21 {
                    let ev = center.2 - half_width_eta + 2.0 * half_width_eta * ie as f64 / 20.0;
                    let val = dual_value(av, bv, ev, rho);
                    if val < best {
                        best = val;
                        arg = (av, bv, ev);
                    }
                }
            }
        }
        center = arg;
        half_width *= 0.35;
        half_width_eta *= 0.35;
    }
    best
}

use fcsurv::causal::{prepare, CausalConfig, CausalDataset};
use fcsurv::fpca::{inner_product, FunctionalSample};
use fcsurv::rng::stream_rng;
use fcsurv::survival::SurvivalSample;
use fcsurv::weights::{balance_diagnostics, CovariateKind, WeightMethod, WeightSet};
use nalgebra::DMatrix as Dm;
use rand::Rng;
use rand_distr::StandardNormal;

/// Marginalization-identity toy: a span-exact single-component treatment
/// with analytic density-ratio weights. Returns (fitted weighted slope,
/// marginalization oracle slope).
pub fn marginalization_toy_slopes(seed: u64) -> (f64, f64) {
    let n = 5000;
    let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
    let mut rng = stream_rng(seed, &[62]);
    // correlation small enough that the density-ratio weights have finite
    // variance, confounding strong enough that the naive slope is far off
    let r = 0.3_f64;
    let b_true = 0.8;
    let c_conf = 1.0;
    let mut a_vals = Vec::with_capacity(n);
    let mut z = Dm::zeros(n, 1);
    let mut values = Dm::zeros(n, grid.len());
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let zi: f64 = rng.sample(StandardNormal);
        let ui: f64 = rng.sample(StandardNormal);
        let ai = r * zi + (1.0 - r * r).sqrt() * ui;
        a_vals.push(ai);
        z[(i, 0)] = zi;
        for (j, &s) in grid.iter().enumerate() {
            values[(i, j)] =
                ai * std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * s).sin();
        }
        y.push(1.0 + b_true * ai + c_conf * zi + 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let cond_var = 1.0 - r * r;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let u = a_vals[i] - r * z[(i, 0)];
            (cond_var.sqrt()) * (0.5 * u * u / cond_var - 0.5 * a_vals[i] * a_vals[i]).exp()
        })
        .collect();
    let mean_w: f64 = raw.iter().sum::<f64>() / n as f64;
    let weights: Vec<f64> = raw.iter().map(|w| w / mean_w).collect();

    let data = CausalDataset::new(
        FunctionalSample::new(grid.clone(), values).unwrap(),
        z.clone(),
        SurvivalSample::from_log_times(y, vec![true; n]).unwrap(),
        CausalConfig::default(),
    )
    .unwrap();
    let prep = prepare(&data).unwrap();
    let set = WeightSet {
        diagnostics: balance_diagnostics(&weights, &prep.a_star, &prep.z_star, &[
            CovariateKind::Continuous,
        ])
        .unwrap(),
        weights,
        method: WeightMethod::Parametric,
        rho: None,
        gamma_slack: None,
    };
    let est = prep.fipw_with_weights(set).unwrap();

    // marginalization-integral oracle, differenced in a
    let zg: Vec<f64> = (0..4001).map(|i| -8.0 + 16.0 * i as f64 / 4000.0).collect();
    let phi: Vec<f64> = zg
        .iter()
        .map(|&v| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt())
        .collect();
    let marginal_mean = |a: f64| -> f64 {
        let integrand: Vec<f64> = zg
            .iter()
            .zip(&phi)
            .map(|(&zv, &p)| (1.0 + b_true * a + c_conf * zv) * p)
            .collect();
        inner_product(&integrand, &vec![1.0; zg.len()], &zg).unwrap()
    };
    let oracle_slope = (marginal_mean(1.0) - marginal_mean(-1.0)) / 2.0;

    let curve: Vec<f64> = est.beta_curve.iter().copied().collect();
    let phi1: Vec<f64> = grid
        .iter()
        .map(|&s| std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * s).sin())
        .collect();
    let fitted_slope = inner_product(&curve, &phi1, &grid).unwrap();
    (fitted_slope, oracle_slope)
}
