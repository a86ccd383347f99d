//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (eigenvectors as columns, matching order).
pub fn sym_eigen(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(s.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(s))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

pub fn cholesky(s: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Cholesky::new(s.clone()).ok_or(Error::NotPositiveDefinite)
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse symmetric square root of a positive definite matrix.
pub fn inv_sqrt_spd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(s);
    let max = vals.iter().copied().fold(0.0, f64::max);
    if vals.iter().any(|&v| !(v > 1e-14 * max.max(f64::MIN_POSITIVE))) {
        return Err(Error::NotPositiveDefinite);
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(symmetrize(&(&vecs * d * vecs.transpose())))
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn sqrt_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(s);
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    symmetrize(&(&vecs * d * vecs.transpose()))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Solves the symmetric positive semidefinite system `a x = b`. When `a` is
/// numerically singular (eigenvalues below `1e-10` of the largest) the
/// minimum-norm solution over the well-determined eigen-directions is
/// returned, so the answer does not depend on rounding noise. Returns `None`
/// when `a` is identically zero.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        let l = ch.l_dirty();
        let diag = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        // pivots bound the eigenvalues loosely, so be conservative
        if lo > 1e-8 * hi {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let coef = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(coef.len(), |i, _| {
        let lam = eig.eigenvalues[i];
        if lam > 1e-10 * max {
            coef[i] / lam
        } else {
            0.0
        }
    });
    Some(&eig.eigenvectors * scaled)
}

/// Rank-`k` truncated SVD of `m`: returns `(scores, loadings)` with
/// `scores = U_k S_k` (n x k) and orthonormal `loadings = V_k` (p x k),
/// ordered by decreasing singular value.
pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = k.min(order.len());
    let scores = DMatrix::from_fn(m.nrows(), k, |i, c| u[(i, order[c])] * svd.singular_values[order[c]]);
    let loadings = DMatrix::from_fn(m.ncols(), k, |j, c| vt[(order[c], j)]);
    (scores, loadings)
}

/// Column means.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Covariance with divisor `n - ddof`.
pub fn covariance(m: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mean = column_means(m);
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    symmetrize(&(centered.transpose() * &centered / (n - ddof) as f64))
}

/// Makes a symmetric positive definite matrix from a vector of
/// eigenvalues and an orthonormal basis.
pub fn compose(vecs: &DMatrix<f64>, vals: &DVector<f64>) -> DMatrix<f64> {
    symmetrize(&(vecs * DMatrix::from_diagonal(vals) * vecs.transpose()))
}
