//! Functional principal component analysis of discretely observed curves.
//!
//! A sample of n curves on a shared grid is decomposed into a mean curve and
//! a truncated Karhunen–Loève basis. Eigenfunctions are orthonormal under
//! the trapezoidal-quadrature inner product on the grid, and per-subject
//! scores are quadrature projections onto that basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative floor under which trailing eigenvalues are treated as zero.
const EIGENVALUE_FLOOR: f64 = 1e-10;

/// n curves observed on a shared, strictly increasing grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalSample {
    grid: Vec<f64>,
    /// n x M matrix; row i holds X_i evaluated on the grid.
    values: DMatrix<f64>,
}

impl FunctionalSample {
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidInput("grid needs at least 2 points".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("grid must be strictly increasing".into()));
        }
        if values.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "values have {} columns but grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Sample restricted to the given rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let m = self.grid.len();
        let mut vals = DMatrix::zeros(rows.len(), m);
        for (r, &i) in rows.iter().enumerate() {
            vals.set_row(r, &self.values.row(i));
        }
        Self {
            grid: self.grid.clone(),
            values: vals,
        }
    }
}

/// Truncated empirical Karhunen–Loève basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaBasis {
    pub grid: Vec<f64>,
    pub mean_curve: DVector<f64>,
    /// M x K; column k is the k-th eigenfunction on the grid.
    pub eigenfunctions: DMatrix<f64>,
    /// Nonincreasing, strictly positive.
    pub eigenvalues: DVector<f64>,
    pub pve_achieved: f64,
    pub quadrature_weights: DVector<f64>,
}

impl FpcaBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Quadrature projection of curves onto the basis: A_ik = <X_i - mean, phi_k>.
    pub fn project(&self, sample: &FunctionalSample) -> Result<ScoreMatrix> {
        if sample.grid_size() != self.mean_curve.len() {
            return Err(Error::DimensionMismatch(
                "sample grid does not match basis grid".into(),
            ));
        }
        let n = sample.n();
        let m = sample.grid_size();
        let mut centered = sample.values.clone();
        for i in 0..n {
            for j in 0..m {
                centered[(i, j)] -= self.mean_curve[j];
            }
        }
        // A = centered * W * Phi
        let mut weighted = self.eigenfunctions.clone();
        for j in 0..m {
            let w = self.quadrature_weights[j];
            for k in 0..self.k() {
                weighted[(j, k)] *= w;
            }
        }
        Ok(ScoreMatrix {
            scores: centered * weighted,
            standardized: None,
        })
    }
}

/// Per-subject functional principal component scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// n x K raw scores A.
    pub scores: DMatrix<f64>,
    /// n x K standardized scores A* with A*_ik = A_ik / sqrt(lambda_k).
    pub standardized: Option<DMatrix<f64>>,
}

/// Covariates whitened by the inverse square root of their second-moment matrix.
#[derive(Debug, Clone)]
pub struct StandardizedCovariates {
    /// n x p matrix Z* = Z Gamma_Z^{-1/2}.
    pub z_star: DMatrix<f64>,
    /// p x p second-moment matrix Gamma_Z = (1/n) Z' Z.
    pub gamma_z: DMatrix<f64>,
}

/// Trapezoidal quadrature weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> DVector<f64> {
    let m = grid.len();
    let mut w = DVector::zeros(m);
    w[0] = (grid[1] - grid[0]) / 2.0;
    w[m - 1] = (grid[m - 1] - grid[m - 2]) / 2.0;
    for j in 1..m - 1 {
        w[j] = (grid[j + 1] - grid[j - 1]) / 2.0;
    }
    w
}

/// Trapezoidal approximation of the L2 inner product of two grid functions.
pub fn inner_product(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "inner_product: f has {}, g has {}, grid has {} points",
            f.len(),
            g.len(),
            grid.len()
        )));
    }
    let w = trapezoid_weights(grid);
    Ok(f.iter()
        .zip(g)
        .zip(w.iter())
        .map(|((a, b), wi)| a * b * wi)
        .sum())
}

/// Estimate the truncated Karhunen–Loève decomposition of a functional sample.
///
/// Rows are demeaned, the quadrature-weighted sample covariance is
/// eigendecomposed, and the smallest K whose cumulative eigenvalue fraction
/// reaches `pve_target` is retained (never past the relative eigenvalue
/// floor). Each eigenfunction is scaled so its entry of largest magnitude is
/// positive, and scores are quadrature projections of the centered curves.
pub fn estimate_fpca(sample: &FunctionalSample, pve_target: f64) -> Result<(FpcaBasis, ScoreMatrix)> {
    if !(pve_target > 0.0 && pve_target <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "pve_target must be in (0, 1], got {pve_target}"
        )));
    }
    let n = sample.n();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 curves".into()));
    }
    let m = sample.grid_size();
    let w = trapezoid_weights(&sample.grid);
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();

    let mean_curve = linalg::column_means(&sample.values);
    // Y = centered * W^{1/2}; the weighted covariance is Y'Y/n.
    let mut y = sample.values.clone();
    for i in 0..n {
        for j in 0..m {
            y[(i, j)] = (y[(i, j)] - mean_curve[j]) * sqrt_w[j];
        }
    }

    // Eigendecompose on the smaller side: the M x M weighted covariance, or
    // the n x n Gram matrix when n < M (same nonzero spectrum).
    let (eigvals, mut eigvecs_w) = if n < m {
        let gram = &y * y.transpose() / n as f64;
        let (vals, u) = linalg::sym_eigen_desc(&gram);
        let mut vecs = DMatrix::zeros(m, n);
        for k in 0..n {
            if vals[k] > 0.0 {
                let col = y.transpose() * u.column(k) / (vals[k] * n as f64).sqrt();
                vecs.set_column(k, &col);
            }
        }
        (vals, vecs)
    } else {
        let cov = y.transpose() * &y / n as f64;
        linalg::sym_eigen_desc(&cov)
    };

    let lambda1 = eigvals[0];
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let floor = EIGENVALUE_FLOOR * lambda1;
    let rank = eigvals.iter().take_while(|&&v| v > floor).count();
    let total: f64 = eigvals.iter().filter(|&&v| v > 0.0).sum();

    let mut cum = 0.0;
    let mut k_sel = rank;
    for k in 0..rank {
        cum += eigvals[k];
        if cum / total >= pve_target {
            k_sel = k + 1;
            break;
        }
    }
    let pve_achieved = eigvals.iter().take(k_sel).sum::<f64>() / total;

    // Map eigenvectors of the weighted problem back to L2 eigenfunctions and
    // fix signs: entry of largest magnitude positive.
    let mut eigenfunctions = DMatrix::zeros(m, k_sel);
    for k in 0..k_sel {
        for j in 0..m {
            eigvecs_w[(j, k)] /= sqrt_w[j];
        }
        let col = eigvecs_w.column(k);
        let mut arg = 0;
        let mut best = 0.0;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = j;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            eigenfunctions[(j, k)] = sign * col[j];
        }
    }

    let basis = FpcaBasis {
        grid: sample.grid.clone(),
        mean_curve,
        eigenfunctions,
        eigenvalues: DVector::from_iterator(k_sel, eigvals.iter().take(k_sel).copied()),
        pve_achieved,
        quadrature_weights: w,
    };
    let scores = basis.project(sample)?;
    Ok((basis, scores))
}

/// Fill the standardized-score field: A*_ik = lambda_k^{-1/2} A_ik.
///
/// Idempotent: the standardized block is always recomputed from the raw
/// scores.
pub fn standardize_scores(scores: &ScoreMatrix, basis: &FpcaBasis) -> Result<ScoreMatrix> {
    let k = basis.k();
    if scores.scores.ncols() != k {
        return Err(Error::DimensionMismatch(
            "score columns do not match basis size".into(),
        ));
    }
    if basis.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidInput(
            "cannot standardize: zero eigenvalue".into(),
        ));
    }
    let mut std = scores.scores.clone();
    for j in 0..k {
        let s = basis.eigenvalues[j].sqrt();
        for i in 0..std.nrows() {
            std[(i, j)] /= s;
        }
    }
    Ok(ScoreMatrix {
        scores: scores.scores.clone(),
        standardized: Some(std),
    })
}

/// Whiten covariates by the symmetric inverse square root of the sample
/// second-moment matrix Gamma_Z = (1/n) Z'Z.
pub fn standardize_covariates(z: &DMatrix<f64>) -> Result<StandardizedCovariates> {
    let n = z.nrows();
    let p = z.ncols();
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "need n > p to standardize covariates (n={n}, p={p})"
        )));
    }
    let gamma_z = z.transpose() * z / n as f64;
    let inv_sqrt = linalg::sym_inv_sqrt(&gamma_z, 1e-12 * gamma_z.trace().max(1.0), "Gamma_Z")
        .map_err(|_| Error::Singular("collinear covariates: Gamma_Z not positive definite".into()))?;
    Ok(StandardizedCovariates {
        z_star: z * inv_sqrt,
        gamma_z,
    })
}

/// Evaluate a linear combination of eigenfunctions on the grid.
pub fn reconstruct_curve(coeffs: &DVector<f64>, basis: &FpcaBasis) -> Result<DVector<f64>> {
    if coeffs.len() != basis.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for a basis of size {}",
            coeffs.len(),
            basis.k()
        )));
    }
    Ok(&basis.eigenfunctions * coeffs)
}
