//! Small dense linear-algebra helpers shared by the estimator modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// `‖v‖²_W = vᵀ W v`.
pub fn weighted_sq(v: &Vector, w: &Matrix) -> f64 {
    debug_assert_eq!(w.ncols(), v.len());
    let mut acc = 0.0;
    for i in 0..w.nrows() {
        let mut row = 0.0;
        for j in 0..w.ncols() {
            row += w[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// `true` when `m` is square and `|m_ij - m_ji| <= tol * max(1, |m|_max)`.
pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Factor `S` with `SᵀS = W` for a symmetric positive semidefinite `W`.
///
/// Round-off negative eigenvalues are clipped to zero, so `‖S v‖² = ‖v‖²_W`
/// up to floating point.
pub fn psd_sqrt(w: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new(w.clone());
    let n = w.nrows();
    let mut s = Matrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        for j in 0..n {
            s[(k, j)] = lam * eig.eigenvectors[(j, k)];
        }
    }
    s
}

pub(crate) fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
