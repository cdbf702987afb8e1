//! Accuracy metrics for estimated coefficient curves and predictions.

use crate::error::{Error, Result};
use crate::fpca::trapezoid_weights;

fn quad_sq_diff(est: &[f64], truth: &[f64], grid: &[f64]) -> Result<(f64, f64)> {
    if est.len() != grid.len() || truth.len() != grid.len() {
        return Err(Error::DimensionMismatch("curve and grid lengths".into()));
    }
    let w = trapezoid_weights(grid);
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..grid.len() {
        let d = est[j] - truth[j];
        num += w[j] * d * d;
        den += w[j] * truth[j] * truth[j];
    }
    Ok((num, den))
}

/// Relative mean squared error of a curve:
/// quadrature of (est - truth)^2 over quadrature of truth^2.
pub fn rmse_beta(est: &[f64], truth: &[f64], grid: &[f64]) -> Result<f64> {
    let (num, den) = quad_sq_diff(est, truth, grid)?;
    if !(den > 0.0) {
        return Err(Error::InvalidInput("zero-norm truth curve".into()));
    }
    Ok(num / den)
}

/// Integrated squared bias of the replication-mean curve: the mean over grid
/// points of the squared deviation.
pub fn isb(est_mean: &[f64], truth: &[f64], grid: &[f64]) -> Result<f64> {
    if est_mean.len() != grid.len() || truth.len() != grid.len() {
        return Err(Error::DimensionMismatch("curve and grid lengths".into()));
    }
    let m = grid.len() as f64;
    Ok(est_mean
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / m)
}

/// Integrated squared error of one replication's curve, normalized by the
/// domain length.
pub fn ise(curve: &[f64], truth: &[f64], grid: &[f64]) -> Result<f64> {
    let (num, _) = quad_sq_diff(curve, truth, grid)?;
    let len = grid[grid.len() - 1] - grid[0];
    Ok(num / len)
}

/// Mean, standard error of the mean, and median of per-replication ISEs.
pub fn ise_aise_mise(
    per_rep_curves: &[Vec<f64>],
    truth: &[f64],
    grid: &[f64],
) -> Result<(f64, f64, f64)> {
    if per_rep_curves.is_empty() {
        return Err(Error::InvalidInput("no replication curves".into()));
    }
    let ises: Vec<f64> = per_rep_curves
        .iter()
        .map(|c| ise(c, truth, grid))
        .collect::<Result<_>>()?;
    let r = ises.len() as f64;
    let mean = ises.iter().sum::<f64>() / r;
    let se = if ises.len() > 1 {
        let var = ises.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    } else {
        0.0
    };
    Ok((mean, se, quantile(&ises, 0.5)))
}

/// Root mean squared prediction error against the causal truth.
pub fn root_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch("prediction lengths".into()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty holdout".into()));
    }
    let n = pred.len() as f64;
    Ok((pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Linear-interpolation sample quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    if v.len() == 1 {
        return v[0];
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::true_beta;
    use approx::assert_abs_diff_eq;

    fn grid(m: usize) -> Vec<f64> {
        (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn metrics_vanish_at_truth() {
        let g = grid(101);
        let b: Vec<f64> = g.iter().map(|&s| true_beta(s)).collect();
        assert_eq!(rmse_beta(&b, &b, &g).unwrap(), 0.0);
        assert_eq!(isb(&b, &b, &g).unwrap(), 0.0);
        assert_eq!(ise(&b, &b, &g).unwrap(), 0.0);
    }

    #[test]
    fn rmse_constant_shift_closed_form() {
        let g = grid(1001);
        let b: Vec<f64> = g.iter().map(|&s| true_beta(s)).collect();
        let shifted: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        // integral of beta0^2 is 2.75, so a unit shift gives 1/2.75
        let r = rmse_beta(&shifted, &b, &g).unwrap();
        assert_abs_diff_eq!(r, 1.0 / 2.75, epsilon = 1e-3);
    }

    #[test]
    fn rmse_doubling_is_exactly_one() {
        let g = grid(501);
        let b: Vec<f64> = g.iter().map(|&s| true_beta(s)).collect();
        let doubled: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        assert_eq!(rmse_beta(&doubled, &b, &g).unwrap(), 1.0);
    }

    #[test]
    fn rmse_zero_norm_truth_errors() {
        let g = grid(11);
        assert!(rmse_beta(&[1.0; 11], &[0.0; 11], &g).is_err());
    }

    #[test]
    fn rmse_quadratic_in_perturbation_scale() {
        let g = grid(201);
        let b: Vec<f64> = g.iter().map(|&s| true_beta(s)).collect();
        let pert: Vec<f64> = g.iter().map(|&s| (3.0 * s).cos()).collect();
        let r_at = |c: f64| {
            let e: Vec<f64> = b.iter().zip(&pert).map(|(x, p)| x + c * p).collect();
            rmse_beta(&e, &b, &g).unwrap()
        };
        let (r_half, r_one, r_two) = (r_at(0.5), r_at(1.0), r_at(2.0));
        assert_abs_diff_eq!(r_half / r_one, 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(r_two / r_one, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn isb_unit_shift_is_one() {
        let g = grid(101);
        let b: Vec<f64> = g.iter().map(|&s| true_beta(s)).collect();
        let shifted: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        assert_abs_diff_eq!(isb(&shifted, &b, &g).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn aise_two_point_arithmetic() {
        let g = grid(3);
        let truth = vec![0.0; 3];
        // curves with ISE exactly 1 and 3: constant curves c have ISE c^2
        let c1 = vec![1.0; 3];
        let c2 = vec![3.0_f64.sqrt(); 3];
        let (aise, se, mise) = ise_aise_mise(&[c1, c2], &truth, &g).unwrap();
        assert_abs_diff_eq!(aise, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(se, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mise, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn aise_exact_replications_are_zero() {
        let g = grid(5);
        let truth = vec![2.0; 5];
        let (a, s, m) = ise_aise_mise(&[truth.clone(), truth.clone()], &truth, &g).unwrap();
        assert_eq!((a, s, m), (0.0, 0.0, 0.0));
    }

    #[test]
    fn root_mse_trivials() {
        let truth = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(root_mse(&truth, &truth).unwrap(), 0.0);
        let mean = 2.5;
        let pred = vec![mean; 4];
        let sd = (truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / 4.0).sqrt();
        assert_abs_diff_eq!(root_mse(&pred, &truth).unwrap(), sd, epsilon = 1e-12);
        assert!(root_mse(&[], &[]).is_err());
    }
}
