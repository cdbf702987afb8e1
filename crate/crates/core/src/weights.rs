//! Functional propensity-score weights and balance diagnostics.
//!
//! Two constructions of per-subject balancing weights from standardized
//! FPC scores A* and standardized covariates Z*:
//!
//! - parametric: Gaussian density ratio f(A*) / f(A* | Z*) with the
//!   conditional model N(xi' Z*, Sigma) estimated by least squares plus one
//!   guarded Newton pass on the weighted moment equation;
//! - nonparametric: penalized empirical-likelihood balancing, maximizing
//!   sum(log w) - (1/2 rho) ||vec(Gamma)||^2 subject to sum(w) = n,
//!   sum(w A*) = 0, sum(w Z*) = 0 and (1/n) sum(w A* Z*') = Gamma, solved
//!   through the profiled dual with a BFGS iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Which construction produced a weight set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightMethod {
    Parametric,
    /// Carries the penalty parameter rho.
    Nonparametric(f64),
}

/// Covariate type for balance diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateKind {
    Continuous,
    Binary,
}

/// Gaussian conditional model behind the parametric weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParametricWeightModel {
    /// p x K regression of A* on Z*.
    pub xi: DMatrix<f64>,
    /// K x K residual covariance.
    pub sigma: DMatrix<f64>,
}

impl ParametricWeightModel {
    /// Raw density-ratio weights
    /// `det(Sigma)^{1/2} exp{ u' Sigma^{-1} u / 2 - ||a||^2 / 2 }` with
    /// `u = a - xi' z`, before any normalization.
    pub fn weights(&self, a_star: &DMatrix<f64>, z_star: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = a_star.nrows();
        let k = a_star.ncols();
        if z_star.nrows() != n || self.xi.ncols() != k || self.xi.nrows() != z_star.ncols() {
            return Err(Error::DimensionMismatch("parametric weight inputs".into()));
        }
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("Sigma not positive definite".into()))?;
        let log_det_half: f64 = (0..k).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
        let resid = a_star - z_star * &self.xi;
        let mut out = Vec::with_capacity(n);
        let mut max_exponent = f64::NEG_INFINITY;
        for i in 0..n {
            let u = resid.row(i).transpose();
            let si_u = chol.solve(&u);
            let a = a_star.row(i).transpose();
            let exponent = log_det_half + 0.5 * u.dot(&si_u) - 0.5 * a.dot(&a);
            max_exponent = max_exponent.max(exponent);
            out.push(exponent.exp());
        }
        if out.iter().any(|w| !w.is_finite()) {
            return Err(Error::WeightOverflow { max_exponent });
        }
        Ok(out)
    }
}

/// Per-(FPC, covariate) balance diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    /// K x p weighted cross-moment (1/n) sum w A* Z*'.
    pub cross_moment: DMatrix<f64>,
    /// Largest absolute cross-moment entry, clamped to [0, 1]. With A* and Z*
    /// standardized this is the balance condition on correlation scale.
    pub max_abs_corr: f64,
    /// K x p weighted absolute Pearson (continuous) or point-biserial
    /// (binary) correlations.
    pub per_covariate_corr: DMatrix<f64>,
    /// K x p flags for pairs where a weighted variance vanished.
    pub degenerate: Vec<Vec<bool>>,
}

/// A fitted set of balancing weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSet {
    /// Positive, normalized to mean one.
    pub weights: Vec<f64>,
    pub method: WeightMethod,
    /// Penalty parameter (nonparametric only).
    pub rho: Option<f64>,
    /// K x p tolerated imbalance Gamma (nonparametric only).
    pub gamma_slack: Option<DMatrix<f64>>,
    pub diagnostics: BalanceReport,
}

impl WeightSet {
    /// Effective sample size sum(w)^2 / sum(w^2).
    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        s * s / s2
    }

    /// Weights winsorized at the given upper quantile and renormalized to
    /// mean one. Available for sensitivity analysis; no clipping is applied
    /// by default anywhere.
    pub fn clipped(&self, quantile: f64, a_star: &DMatrix<f64>, z_star: &DMatrix<f64>) -> Self {
        let cap = sample_quantile(&self.weights, quantile);
        let mut w: Vec<f64> = self.weights.iter().map(|&x| x.min(cap)).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for x in &mut w {
            *x /= mean;
        }
        let kinds = vec![CovariateKind::Continuous; z_star.ncols()];
        let diagnostics = balance_diagnostics(&w, a_star, z_star, &kinds)
            .expect("dimensions already validated");
        Self {
            weights: w,
            method: self.method,
            rho: self.rho,
            gamma_slack: self.gamma_slack.clone(),
            diagnostics,
        }
    }
}

fn sample_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn normalize_mean_one(mut w: Vec<f64>) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for x in &mut w {
        *x /= mean;
    }
    w
}

/// Weighted cross-moments and correlations between score and covariate columns.
///
/// Unit weights give the unweighted diagnostics. Zero weighted variance in a
/// column reports correlation 0 with the degeneracy flag set.
pub fn balance_diagnostics(
    weights: &[f64],
    a_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
    covariate_kinds: &[CovariateKind],
) -> Result<BalanceReport> {
    let n = a_star.nrows();
    if z_star.nrows() != n || weights.len() != n {
        return Err(Error::DimensionMismatch("balance diagnostics inputs".into()));
    }
    if covariate_kinds.len() != z_star.ncols() {
        return Err(Error::DimensionMismatch(
            "one covariate kind per Z* column".into(),
        ));
    }
    let k = a_star.ncols();
    let p = z_star.ncols();
    let wsum: f64 = weights.iter().sum();

    let mut cross = DMatrix::zeros(k, p);
    for i in 0..n {
        for a in 0..k {
            for b in 0..p {
                cross[(a, b)] += weights[i] * a_star[(i, a)] * z_star[(i, b)];
            }
        }
    }
    cross /= n as f64;

    let wmean = |col: nalgebra::DVectorView<f64>| -> f64 {
        col.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / wsum
    };
    let a_means: Vec<f64> = (0..k).map(|j| wmean(a_star.column(j))).collect();
    let z_means: Vec<f64> = (0..p).map(|j| wmean(z_star.column(j))).collect();
    let wvar = |col: nalgebra::DVectorView<f64>, mean: f64| -> (f64, f64) {
        let mut var = 0.0;
        let mut msq = 0.0;
        for (x, w) in col.iter().zip(weights) {
            var += w * (x - mean) * (x - mean);
            msq += w * x * x;
        }
        (var / wsum, msq / wsum)
    };

    let mut corr = DMatrix::zeros(k, p);
    let mut degenerate = vec![vec![false; p]; k];
    for a in 0..k {
        let (va, ma) = wvar(a_star.column(a), a_means[a]);
        for b in 0..p {
            // point-biserial is Pearson on a 0/1 coding, so both kinds share
            // the weighted-moment formula; the kind only labels the output
            let _ = covariate_kinds[b];
            let (vb, mb) = wvar(z_star.column(b), z_means[b]);
            let deg_a = va <= 1e-20 * ma.max(f64::MIN_POSITIVE);
            let deg_b = vb <= 1e-20 * mb.max(f64::MIN_POSITIVE);
            if deg_a || deg_b {
                degenerate[a][b] = true;
                corr[(a, b)] = 0.0;
                continue;
            }
            let mut cov = 0.0;
            for i in 0..n {
                cov += weights[i] * (a_star[(i, a)] - a_means[a]) * (z_star[(i, b)] - z_means[b]);
            }
            cov /= wsum;
            corr[(a, b)] = (cov / (va * vb).sqrt()).abs();
        }
    }

    let max_abs_corr = cross
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .min(1.0);
    Ok(BalanceReport {
        cross_moment: cross,
        max_abs_corr,
        per_covariate_corr: corr,
        degenerate,
    })
}

/// Fit the Gaussian density-ratio weights.
///
/// Two steps: xi by multivariate least squares of A* on Z* with Sigma the
/// pooled residual covariance, then one Newton pass on the weighted moment
/// equation `(1/n) sum w_i A*_i Z*_i' = 0`, accepted only if it reduces the
/// moment norm without inflating the largest normalized weight. Returned
/// weights are normalized to mean one.
pub fn fit_parametric_weights(
    a_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
) -> Result<(ParametricWeightModel, WeightSet)> {
    let n = a_star.nrows();
    let k = a_star.ncols();
    let p = z_star.ncols();
    if z_star.nrows() != n {
        return Err(Error::DimensionMismatch("A* and Z* row counts".into()));
    }
    if n <= p + k {
        return Err(Error::InvalidInput(format!(
            "need n > p + K for parametric weights (n={n}, p={p}, K={k})"
        )));
    }

    let ztz = z_star.transpose() * z_star;
    let zta = z_star.transpose() * a_star;
    let xi = linalg::solve_spd_mat(&ztz, &zta, "Z*'Z* singular")?;
    let sigma = pooled_residual_cov(a_star, z_star, &xi);
    check_sigma(&sigma)?;
    let mut model = ParametricWeightModel { xi, sigma };
    let mut w = model.weights(a_star, z_star)?;

    if let Some((xi_new, w_new)) = newton_refine(&model, a_star, z_star, &w)? {
        let sigma_new = pooled_residual_cov(a_star, z_star, &xi_new);
        if check_sigma(&sigma_new).is_ok() {
            model = ParametricWeightModel {
                xi: xi_new,
                sigma: model.sigma,
            };
            w = w_new;
        }
    }

    let weights = normalize_mean_one(w);
    let kinds = vec![CovariateKind::Continuous; p];
    let diagnostics = balance_diagnostics(&weights, a_star, z_star, &kinds)?;
    Ok((
        model,
        WeightSet {
            weights,
            method: WeightMethod::Parametric,
            rho: None,
            gamma_slack: None,
            diagnostics,
        },
    ))
}

fn pooled_residual_cov(
    a_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
    xi: &DMatrix<f64>,
) -> DMatrix<f64> {
    let resid = a_star - z_star * xi;
    resid.transpose() * &resid / a_star.nrows() as f64
}

fn check_sigma(sigma: &DMatrix<f64>) -> Result<()> {
    let (vals, _) = linalg::sym_eigen_desc(sigma);
    let min = vals[vals.len() - 1];
    if !(min > 1e-10) {
        return Err(Error::Singular(format!(
            "residual covariance nearly singular (min eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}

fn moment_matrix(w: &[f64], a_star: &DMatrix<f64>, z_star: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a_star.nrows();
    let mut m = DMatrix::zeros(a_star.ncols(), z_star.ncols());
    for i in 0..n {
        for a in 0..a_star.ncols() {
            for b in 0..z_star.ncols() {
                m[(a, b)] += w[i] * a_star[(i, a)] * z_star[(i, b)];
            }
        }
    }
    m / n as f64
}

fn max_rel(w: &[f64]) -> f64 {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().fold(0.0_f64, |m, &x| m.max(x)) / mean
}

/// One damped Newton pass on the weighted moment equation in xi.
fn newton_refine(
    model: &ParametricWeightModel,
    a_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
    w0: &[f64],
) -> Result<Option<(DMatrix<f64>, Vec<f64>)>> {
    let n = a_star.nrows();
    let k = a_star.ncols();
    let p = z_star.ncols();
    let m0 = moment_matrix(w0, a_star, z_star);
    let norm0 = m0.norm();
    if norm0 < 1e-12 {
        return Ok(None);
    }
    let chol = match model.sigma.clone().cholesky() {
        Some(c) => c,
        None => return Ok(None),
    };
    let resid = a_star - z_star * &model.xi;
    // J[(k,c), (a,b)] = -(1/n) sum_i w_i Z_ia (Sigma^{-1} u_i)_b A_ik Z_ic
    let mut si_u = DMatrix::zeros(n, k);
    for i in 0..n {
        let u = resid.row(i).transpose();
        si_u.set_row(i, &chol.solve(&u).transpose());
    }
    let mut jac = DMatrix::zeros(k * p, p * k);
    for i in 0..n {
        for a in 0..p {
            for b in 0..k {
                let dw = -w0[i] * z_star[(i, a)] * si_u[(i, b)];
                for kk in 0..k {
                    for c in 0..p {
                        jac[(kk * p + c, a * k + b)] +=
                            dw * a_star[(i, kk)] * z_star[(i, c)] / n as f64;
                    }
                }
            }
        }
    }
    let mut rhs = DVector::zeros(k * p);
    for kk in 0..k {
        for c in 0..p {
            rhs[kk * p + c] = -m0[(kk, c)];
        }
    }
    let step = match jac.lu().solve(&rhs) {
        Some(s) => s,
        None => return Ok(None),
    };
    let mut xi_new = model.xi.clone();
    for a in 0..p {
        for b in 0..k {
            xi_new[(a, b)] += step[a * k + b];
        }
    }
    let trial = ParametricWeightModel {
        xi: xi_new.clone(),
        sigma: model.sigma.clone(),
    };
    let w_new = match trial.weights(a_star, z_star) {
        Ok(w) => w,
        Err(_) => return Ok(None),
    };
    let norm1 = moment_matrix(&w_new, a_star, z_star).norm();
    if norm1 < norm0 && max_rel(&w_new) <= 1.5 * max_rel(w0) {
        Ok(Some((xi_new, w_new)))
    } else {
        Ok(None)
    }
}

/// Penalized empirical-likelihood balancing weights.
///
/// Solves `max_{w>0,Gamma} sum log w_i - (1/2 rho) ||vec(Gamma)||^2` under
/// `sum w = n`, `sum w A* = 0`, `sum w Z* = 0`,
/// `(1/n) sum w A* Z*' = Gamma`. Gamma is profiled out through its dual
/// multiplier (`Gamma = rho * eta`) and the remaining dual in the
/// K + p + K*p multipliers is minimized by BFGS with a line search; the
/// multiplier of `sum w = n` is recovered by a one-dimensional root solve at
/// every evaluation, which keeps all weights positive throughout.
pub fn fit_nonparametric_weights(
    a_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
    rho: f64,
) -> Result<WeightSet> {
    let n = a_star.nrows();
    let k = a_star.ncols();
    let p = z_star.ncols();
    if z_star.nrows() != n {
        return Err(Error::DimensionMismatch("A* and Z* row counts".into()));
    }
    if n <= k + p + 1 {
        return Err(Error::InvalidInput(format!(
            "need n > K + p + 1 for nonparametric weights (n={n})"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidInput("rho must be positive".into()));
    }
    // Necessary feasibility: exact balance needs zero inside each coordinate
    // range.
    for j in 0..k {
        let col = a_star.column(j);
        if !(col.min() < 0.0 && col.max() > 0.0) {
            return Err(Error::NoInteriorPoint(format!("A*[{j}]")));
        }
    }
    for j in 0..p {
        let col = z_star.column(j);
        if !(col.min() < 0.0 && col.max() > 0.0) {
            return Err(Error::NoInteriorPoint(format!("Z*[{j}]")));
        }
    }

    let d = k + p + k * p;
    // moment rows g_i = [A*_i | Z*_i | vec(A*_i Z*_i')/n]
    let mut g = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..k {
            g[(i, j)] = a_star[(i, j)];
        }
        for j in 0..p {
            g[(i, k + j)] = z_star[(i, j)];
        }
        for a in 0..k {
            for b in 0..p {
                g[(i, k + p + a * p + b)] = a_star[(i, a)] * z_star[(i, b)] / n as f64;
            }
        }
    }
    let mut penalty = DVector::zeros(d);
    for j in k + p..d {
        penalty[j] = rho;
    }

    let solver = DualSolver {
        g,
        penalty,
        n: n as f64,
    };
    let tol = 1e-8 * n as f64;
    let max_iter = 500;
    let v = solver.solve_bfgs(DVector::zeros(d), tol, max_iter)?;

    let (_, weights_raw, _) = solver.eval(&v)?;
    let weights = {
        let total: f64 = weights_raw.iter().sum();
        weights_raw.iter().map(|w| w * n as f64 / total).collect::<Vec<f64>>()
    };
    let mut gamma = DMatrix::zeros(k, p);
    for a in 0..k {
        for b in 0..p {
            gamma[(a, b)] = rho * v[k + p + a * p + b];
        }
    }
    let kinds = vec![CovariateKind::Continuous; p];
    let diagnostics = balance_diagnostics(&weights, a_star, z_star, &kinds)?;
    Ok(WeightSet {
        weights,
        method: WeightMethod::Nonparametric(rho),
        rho: Some(rho),
        gamma_slack: Some(gamma),
        diagnostics,
    })
}

/// Profiled dual of the penalized empirical-likelihood problem.
struct DualSolver {
    g: DMatrix<f64>,
    penalty: DVector<f64>,
    n: f64,
}

impl DualSolver {
    /// Root of sum_i 1/(mu + t_i) = n over mu > -min(t).
    fn solve_mu(&self, t: &DVector<f64>) -> f64 {
        let lo_bound = -t.min();
        let mut lo = lo_bound + 1e-300;
        let mut hi = lo_bound + 1.0;
        let h = |mu: f64| -> f64 { t.iter().map(|ti| 1.0 / (mu + ti)).sum::<f64>() - self.n };
        while h(hi) > 0.0 {
            hi = lo_bound + (hi - lo_bound) * 2.0;
        }
        // safeguarded Newton within [lo, hi]
        let mut mu = lo_bound + (self.g.nrows() as f64) / self.n; // h(that) <= 0 roughly
        if !(mu > lo && mu < hi) {
            mu = 0.5 * (lo + hi);
        }
        for _ in 0..200 {
            let hv = h(mu);
            if hv > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let hp: f64 = -t.iter().map(|ti| (mu + ti).powi(-2)).sum::<f64>();
            let newton = mu - hv / hp;
            mu = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hv.abs() <= 1e-12 * self.n {
                break;
            }
        }
        mu
    }

    /// Dual objective, weights, and gradient at v.
    fn eval(&self, v: &DVector<f64>) -> Result<(f64, Vec<f64>, DVector<f64>)> {
        let t = &self.g * v;
        let mu = self.solve_mu(&t);
        let n_rows = self.g.nrows();
        let mut obj = self.n * mu;
        let mut w = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            let d = mu + t[i];
            if !(d > 0.0) {
                return Err(Error::NonConvergence {
                    iterations: 0,
                    grad_norm: f64::INFINITY,
                });
            }
            obj -= d.ln();
            w.push(1.0 / d);
        }
        let mut grad = DVector::zeros(v.len());
        for i in 0..n_rows {
            for j in 0..v.len() {
                grad[j] -= w[i] * self.g[(i, j)];
            }
        }
        for j in 0..v.len() {
            obj += 0.5 * self.penalty[j] * v[j] * v[j];
            grad[j] += self.penalty[j] * v[j];
        }
        Ok((obj, w, grad))
    }

    /// Inverse of the reduced Hessian at v (Schur complement over mu).
    fn inverse_hessian(&self, w: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.g.ncols();
        let mut h = DMatrix::zeros(d, d);
        let mut hv_mu: DVector<f64> = DVector::zeros(d);
        let mut h_mumu = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            let w2 = wi * wi;
            h_mumu += w2;
            for a in 0..d {
                let ga = self.g[(i, a)];
                hv_mu[a] += w2 * ga;
                for b in a..d {
                    h[(a, b)] += w2 * ga * self.g[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
            h[(a, a)] += self.penalty[a];
        }
        let outer: DMatrix<f64> = &hv_mu * hv_mu.transpose();
        let schur = h - outer / h_mumu;
        schur.cholesky().map(|c| c.inverse())
    }

    fn solve_bfgs(&self, v0: DVector<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
        // line-search stalls near the optimum are accepted up to the
        // constraint tolerance the weights must meet anyway
        let stall_tol = 100.0 * tol;
        let mut v = v0;
        let (mut f, mut w, mut grad) = self.eval(&v)?;
        let mut h_inv = self
            .inverse_hessian(&w)
            .unwrap_or_else(|| DMatrix::identity(v.len(), v.len()));
        let mut just_restarted = false;
        for iter in 0..max_iter {
            let gnorm = grad.amax();
            if gnorm <= tol {
                return Ok(v);
            }
            let dir = -(&h_inv * &grad);
            let slope = grad.dot(&dir);
            let mut dir = dir;
            let mut slope = slope;
            if slope >= 0.0 {
                dir = -grad.clone();
                slope = grad.dot(&dir);
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &v + &dir * step;
                if let Ok((fc, wc, gc)) = self.eval(&cand) {
                    if fc <= f + 1e-4 * step * slope {
                        let s = &cand - &v;
                        let y = &gc - &grad;
                        let sy = s.dot(&y);
                        if sy > 1e-12 {
                            let hy = &h_inv * &y;
                            let yhy = y.dot(&hy);
                            let c1 = (sy + yhy) / (sy * sy);
                            h_inv = h_inv.clone() - (&hy * s.transpose() + &s * hy.transpose()) / sy
                                + &s * s.transpose() * c1;
                        }
                        v = cand;
                        f = fc;
                        w = wc;
                        grad = gc;
                        accepted = true;
                        just_restarted = false;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                if just_restarted {
                    // a fresh Newton direction could not improve the
                    // objective: we are at the numerical floor
                    return if gnorm <= stall_tol {
                        Ok(v)
                    } else {
                        Err(Error::NonConvergence {
                            iterations: iter,
                            grad_norm: gnorm,
                        })
                    };
                }
                just_restarted = true;
                h_inv = self
                    .inverse_hessian(&w)
                    .unwrap_or_else(|| DMatrix::identity(v.len(), v.len()));
            }
        }
        let gnorm = grad.amax();
        if gnorm <= stall_tol {
            Ok(v)
        } else {
            Err(Error::NonConvergence {
                iterations: max_iter,
                grad_norm: gnorm,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn centered_gaussian(n: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream_rng(seed, &[41]);
        let mut m = DMatrix::from_fn(n, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let means = crate::linalg::column_means(&m);
        for i in 0..n {
            for j in 0..cols {
                m[(i, j)] -= means[j];
            }
        }
        m
    }

    #[test]
    fn parametric_formula_exact_at_truth() {
        let a = centered_gaussian(40, 2, 1);
        let z = centered_gaussian(40, 3, 2);
        let model = ParametricWeightModel {
            xi: DMatrix::zeros(3, 2),
            sigma: DMatrix::identity(2, 2),
        };
        let w = model.weights(&a, &z).unwrap();
        assert!(w.iter().all(|&x| x == 1.0), "weights must be exactly one");
    }

    #[test]
    fn parametric_null_association() {
        // A* independent of Z*, truth xi = 0, Sigma = I
        let n = 2000;
        let a = centered_gaussian(n, 1, 3);
        let z = centered_gaussian(n, 1, 4);
        let (model, set) = fit_parametric_weights(&a, &z).unwrap();
        let raw = model.weights(&a, &z).unwrap();
        assert!(
            raw.iter().all(|&w| w > 0.8 && w < 1.25),
            "raw weight range [{:.3}, {:.3}]",
            raw.iter().cloned().fold(f64::INFINITY, f64::min),
            raw.iter().cloned().fold(0.0, f64::max)
        );
        let m = moment_matrix(&set.weights, &a, &z);
        assert!(m.norm() <= 0.05, "moment norm {}", m.norm());
        let mean: f64 = set.weights.iter().sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn parametric_consistency_single_pair() {
        // A* = 0.6 Z* + e, Var(e) = 0.64
        let n = 2000;
        let mut rng = crate::rng::stream_rng(5, &[42]);
        let z = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(n, 1, |i, _| {
            0.6 * z[(i, 0)] + 0.8 * rng.sample::<f64, _>(StandardNormal)
        });
        let (model, _) = fit_parametric_weights(&a, &z).unwrap();
        assert!((model.xi[(0, 0)] - 0.6).abs() < 0.05, "xi = {}", model.xi[(0, 0)]);
        assert!(
            (model.sigma[(0, 0)] - 0.64).abs() < 0.05,
            "sigma = {}",
            model.sigma[(0, 0)]
        );
    }

    #[test]
    fn parametric_overflow_reports_max_exponent() {
        // a near-singular conditional covariance with far-out residuals
        // overflows the density ratio
        let n = 30;
        let mut a = centered_gaussian(n, 1, 20);
        let z = centered_gaussian(n, 1, 21);
        for i in 0..n {
            a[(i, 0)] *= 40.0;
        }
        let model = ParametricWeightModel {
            xi: DMatrix::zeros(1, 1),
            sigma: DMatrix::from_element(1, 1, 1e-4),
        };
        match model.weights(&a, &z) {
            Err(Error::WeightOverflow { max_exponent }) => assert!(max_exponent > 700.0),
            other => panic!("expected overflow error, got {other:?}"),
        }
    }

    #[test]
    fn nonparametric_unit_weights_at_loose_penalty() {
        let n = 60;
        let a = centered_gaussian(n, 2, 6);
        let z = centered_gaussian(n, 2, 7);
        let set = fit_nonparametric_weights(&a, &z, 1e6 / n as f64).unwrap();
        for &w in &set.weights {
            assert!((w - 1.0).abs() <= 1e-6, "w = {w}");
        }
    }

    #[test]
    fn nonparametric_constraints_hold() {
        let n = 300;
        let mut rng = crate::rng::stream_rng(8, &[43]);
        let z = centered_gaussian(n, 2, 9);
        let a = DMatrix::from_fn(n, 2, |i, j| {
            0.5 * z[(i, j)] + rng.sample::<f64, _>(StandardNormal)
        });
        let rho = 0.1 / n as f64;
        let set = fit_nonparametric_weights(&a, &z, rho).unwrap();
        let tol = 1e-6 * n as f64;
        let w = &set.weights;
        assert!((w.iter().sum::<f64>() - n as f64).abs() <= tol);
        for j in 0..2 {
            let sa: f64 = (0..n).map(|i| w[i] * a[(i, j)]).sum();
            let sz: f64 = (0..n).map(|i| w[i] * z[(i, j)]).sum();
            assert!(sa.abs() <= tol, "sum w A*[{j}] = {sa}");
            assert!(sz.abs() <= tol, "sum w Z*[{j}] = {sz}");
        }
        // achieved Gamma equals the recorded slack
        let gamma = set.gamma_slack.as_ref().unwrap();
        let achieved = moment_matrix(w, &a, &z);
        assert!((gamma - &achieved).norm() <= 1e-6, "{}", (gamma - achieved).norm());
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn nonparametric_gamma_monotone_in_rho() {
        let n = 200;
        let mut rng = crate::rng::stream_rng(10, &[44]);
        let z = centered_gaussian(n, 2, 11);
        let a = DMatrix::from_fn(n, 2, |i, j| {
            0.7 * z[(i, j)] + 0.6 * rng.sample::<f64, _>(StandardNormal)
        });
        let norms: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|r| {
                fit_nonparametric_weights(&a, &z, r / n as f64)
                    .unwrap()
                    .gamma_slack
                    .unwrap()
                    .norm()
            })
            .collect();
        assert!(
            norms[0] >= norms[1] - 1e-8 && norms[1] >= norms[2] - 1e-8,
            "gamma norms {norms:?}"
        );
    }

    #[test]
    fn nonparametric_infeasible_is_reported() {
        // one A* column strictly positive: zero not in the convex hull
        let n = 30;
        let mut rng = crate::rng::stream_rng(12, &[45]);
        let a = DMatrix::from_fn(n, 1, |_, _| 1.0 + rng.gen_range(0.0..1.0));
        let z = centered_gaussian(n, 1, 13);
        assert!(matches!(
            fit_nonparametric_weights(&a, &z, 0.1 / n as f64),
            Err(Error::NoInteriorPoint(_))
        ));
    }

    #[test]
    fn diagnostics_identical_columns_have_unit_correlation() {
        let a = centered_gaussian(50, 1, 14);
        let z = a.clone();
        let w = vec![1.0; 50];
        let rep = balance_diagnostics(&w, &a, &z, &[CovariateKind::Continuous]).unwrap();
        assert_abs_diff_eq!(rep.per_covariate_corr[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diagnostics_independent_columns_are_small() {
        let n = 2000;
        let a = centered_gaussian(n, 2, 15);
        let z = centered_gaussian(n, 2, 16);
        let w = vec![1.0; n];
        let rep = balance_diagnostics(
            &w,
            &a,
            &z,
            &[CovariateKind::Continuous, CovariateKind::Continuous],
        )
        .unwrap();
        assert!(
            rep.per_covariate_corr.iter().all(|&c| c <= 0.08),
            "{:?}",
            rep.per_covariate_corr
        );
    }

    #[test]
    fn diagnostics_constant_column_is_degenerate() {
        let a = centered_gaussian(20, 1, 17);
        let z = DMatrix::from_fn(20, 1, |_, _| 1.0);
        let w: Vec<f64> = (0..20).map(|i| 0.5 + 0.05 * i as f64).collect();
        let rep = balance_diagnostics(&w, &a, &z, &[CovariateKind::Binary]).unwrap();
        assert!(rep.degenerate[0][0]);
        assert_eq!(rep.per_covariate_corr[(0, 0)], 0.0);
    }

    #[test]
    fn diagnostics_scale_equivariant() {
        let n = 100;
        let a = centered_gaussian(n, 2, 18);
        let z = centered_gaussian(n, 2, 19);
        let w: Vec<f64> = (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.2).collect();
        let kinds = [CovariateKind::Continuous, CovariateKind::Continuous];
        let r1 = balance_diagnostics(&w, &a, &z, &kinds).unwrap();
        let mut a2 = a.clone();
        let mut z2 = z.clone();
        for i in 0..n {
            a2[(i, 0)] *= 3.5;
            z2[(i, 1)] *= 0.02;
        }
        let r2 = balance_diagnostics(&w, &a2, &z2, &kinds).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    r1.per_covariate_corr[(i, j)],
                    r2.per_covariate_corr[(i, j)],
                    epsilon = 1e-10
                );
            }
        }
    }
}
