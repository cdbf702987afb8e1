//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns,
/// ordered to match. Ties break by original index so results are
/// deterministic.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let se = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| se.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        vecs.set_column(j, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Solve the symmetric positive-definite system `a x = b` by Cholesky.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(context.to_string()))?;
    Ok(chol.solve(b))
}

/// Solve `a X = B` (multiple right-hand sides) by Cholesky.
pub fn solve_spd_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(context.to_string()))?;
    Ok(chol.solve(b))
}

/// Solve a general square system by LU with a singularity check.
pub fn solve_lu(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(context.to_string()))
}

/// Symmetric inverse square root `m^{-1/2}` of a positive-definite matrix.
///
/// Errors if the smallest eigenvalue is at or below `floor`.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64, context: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m);
    let min = vals[vals.len() - 1];
    if !(min > floor) {
        return Err(Error::Singular(format!(
            "{context}: smallest eigenvalue {min:.3e}"
        )));
    }
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        vecs[(i, j)] / vals[j].sqrt()
    });
    Ok(&scaled * vecs.transpose())
}

/// Sample column means of a matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}
