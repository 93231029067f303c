//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solution via SVD.
///
/// Singular values below `1e-12 · max(rows, cols) · σ_max` are treated as zero.
pub(crate) fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return DVector::zeros(x.ncols());
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-12 * x.nrows().max(x.ncols()) as f64;
    svd.solve(y, tol).unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

/// Columns kept by greedy Gram–Schmidt in index order; a column whose
/// residual norm falls below `rel_tol` times its own norm is dropped.
pub(crate) fn independent_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col.clone();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > rel_tol * norm {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}
