//! Dense linear-algebra helpers shared by the model and estimator layers.

use crate::error::{FabError, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative tolerance used for all rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Orthonormal basis of col(X) with the numerical rank, from a
/// column-pivoted QR. Rank counts diagonal entries of R above
/// `RANK_RTOL` relative to the largest one. An all-zero matrix has
/// rank 0 and an empty basis.
pub fn col_basis(x: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = x.nrows();
    if x.ncols() == 0 || x.iter().all(|&v| v == 0.0) {
        return (DMatrix::zeros(n, 0), 0);
    }
    let qr = x.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let dmax = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0_f64, f64::max);
    let rank = (0..r.nrows().min(r.ncols()))
        .take_while(|&i| r[(i, i)].abs() > RANK_RTOL * dmax)
        .count();
    (q.columns(0, rank).into_owned(), rank)
}

/// Completes an orthonormal set `q` (n x k, orthonormal columns) to a
/// full basis of R^n and returns the complement (n x (n-k)). Modified
/// Gram-Schmidt with one reorthogonalization pass; candidates are the
/// standard basis vectors, so the result is deterministic.
pub fn orthonormal_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let k = q.ncols();
    let basis: Vec<DVector<f64>> = (0..k).map(|j| q.column(j).into_owned()).collect();
    let mut extra: Vec<DVector<f64>> = Vec::with_capacity(n - k);
    for i in 0..n {
        if k + extra.len() == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for _ in 0..2 {
            for b in basis.iter().chain(extra.iter()) {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            extra.push(v / norm);
        }
    }
    debug_assert_eq!(k + extra.len(), n);
    if extra.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&extra)
}

/// Cholesky factorization with escalating diagonal jitter, capped at
/// `1e-8 * trace/n`. Returns the factor and the jitter actually used.
pub fn cholesky_jitter(s: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(FabError::DimensionMismatch("cholesky needs square input".into()));
    }
    let tbar = s.trace() / n as f64;
    if !tbar.is_finite() {
        return Err(FabError::NonFinite("covariance".into()));
    }
    let mut jitter = 0.0_f64;
    loop {
        let mut m = s.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch, jitter));
        }
        jitter = if jitter == 0.0 {
            1e-14 * tbar.max(f64::MIN_POSITIVE)
        } else {
            jitter * 100.0
        };
        if jitter > 1e-8 * tbar {
            return Err(FabError::DegenerateCovariance);
        }
    }
}

/// log-determinant from a Cholesky factor.
pub fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Symmetrizes and clips negative eigenvalues at zero.
pub fn clip_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Minimum-norm least-squares solution of A x = b via SVD.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, RANK_RTOL * svd.singular_values.max())
        .map_err(|e| FabError::InvalidArgument(e.to_string()))
}

/// Orthonormal basis of the null space of A (columns): the orthogonal
/// complement of the row space.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (row_basis, _) = col_basis(&a.transpose());
    orthonormal_complement(&row_basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_of_identity_is_identity_sized() {
        let (q, rank) = col_basis(&DMatrix::identity(3, 3));
        assert_eq!(rank, 3);
        let p = &q * q.transpose();
        assert!((p - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn collinear_columns_lose_rank() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (_, rank) = col_basis(&x);
        assert_eq!(rank, 1);
    }

    #[test]
    fn zero_matrix_has_empty_basis() {
        let (q, rank) = col_basis(&DMatrix::zeros(4, 2));
        assert_eq!(rank, 0);
        assert_eq!(q.ncols(), 0);
    }

    #[test]
    fn complement_is_orthogonal_and_complete() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 0.0, 1.0, 1.0, -1.0, 2.0, 0.0]);
        let (q, rank) = col_basis(&x);
        assert_eq!(rank, 2);
        let w = orthonormal_complement(&q);
        assert_eq!(w.ncols(), 2);
        assert!((w.transpose() * &w - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((q.transpose() * &w).norm() < 1e-12);
    }

    #[test]
    fn jittered_cholesky_recovers_semidefinite() {
        // rank-1 PSD matrix needs jitter but must not error
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = &v * v.transpose();
        let (ch, jitter) = cholesky_jitter(&s).unwrap();
        assert!(jitter > 0.0);
        let x = ch.solve(&v);
        assert!(x.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn clip_psd_removes_negative_eigenvalues() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let c = clip_psd(&s);
        let eig = nalgebra::SymmetricEigen::new(c.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-14));
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(c[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn null_space_of_difference_constraint() {
        // A = [1, -1]; null space spanned by (1,1)/sqrt(2)
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let ns = null_space(&a);
        assert_eq!(ns.ncols(), 1);
        assert!((ns[(0, 0)].abs() - ns[(1, 0)].abs()).abs() < 1e-12);
        assert!((a * &ns).norm() < 1e-12);
    }
}
