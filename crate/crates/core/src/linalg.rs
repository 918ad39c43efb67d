//! Small dense linear-algebra helpers shared by the solvers.
//!
//! Every symmetric positive-definite factorization in the crate goes through
//! [`cholesky`], which records the factorized dimension in a thread-local
//! probe. The ECM driver resets the probe before its loop and reads the
//! maximum afterwards, so callers can check that no `n x n` system was
//! factorized while iterating.

use std::cell::Cell;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

thread_local! {
    static MAX_FACTOR_DIM: Cell<usize> = const { Cell::new(0) };
}

/// Thread-local record of the largest matrix factorized since the last reset.
pub mod factor_probe {
    use super::MAX_FACTOR_DIM;

    pub fn reset() {
        MAX_FACTOR_DIM.with(|c| c.set(0));
    }

    pub fn max_dim() -> usize {
        MAX_FACTOR_DIM.with(|c| c.get())
    }

    pub(crate) fn record(dim: usize) {
        MAX_FACTOR_DIM.with(|c| {
            if dim > c.get() {
                c.set(dim)
            }
        });
    }
}

pub type Chol = Cholesky<f64, Dyn>;

/// Crude condition estimate from the diagonal of the input.
fn diag_condition(m: &DMatrix<f64>) -> f64 {
    let d = m.diagonal();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Chol> {
    factor_probe::record(m.nrows());
    let cond = diag_condition(&m);
    Cholesky::new(m).ok_or_else(|| Error::numeric(format!("{what} is not positive definite"), cond))
}

/// Inverse of a lower-triangular matrix by column-wise forward substitution,
/// skipping the structural zeros above the diagonal. Entries above the
/// diagonal of `l` are never read.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = m.column_mut(j);
        col[j] = 1.0;
        for k in j..n {
            let v = col[k] / l[(k, k)];
            col[k] = v;
            if v != 0.0 {
                let lk = l.column(k);
                for i in k + 1..n {
                    col[i] -= lk[i] * v;
                }
            }
        }
    }
    m
}

pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x' v` for every column of `x`.
pub fn xt_times(x: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    x.tr_mul(v)
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = sum_ij A_ij B_ji
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * (1.0 + m[(i, j)].abs()) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangular_inverse_matches_dense() {
        let a = DMatrix::from_fn(6, 6, |i, j| 1.0 / (1.0 + i as f64 + j as f64)) + DMatrix::identity(6, 6);
        let l = a.clone().cholesky().unwrap().l();
        let m = lower_triangular_inverse(&l);
        assert!((&m * &l - DMatrix::identity(6, 6)).amax() < 1e-13);
        assert!((m.tr_mul(&m) - a.try_inverse().unwrap()).amax() < 1e-12);
    }

    #[test]
    fn probe_tracks_largest_factorization() {
        factor_probe::reset();
        cholesky(DMatrix::identity(3, 3), "a").unwrap();
        cholesky(DMatrix::identity(7, 7), "b").unwrap();
        cholesky(DMatrix::identity(2, 2), "c").unwrap();
        assert_eq!(factor_probe::max_dim(), 7);
        factor_probe::reset();
        assert_eq!(factor_probe::max_dim(), 0);
    }

    #[test]
    fn non_spd_reports_numeric_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(m, "m"), Err(Error::Numeric { .. })));
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 4.0]));
        let c = cholesky(m, "d").unwrap();
        assert!((log_det(&c) - 24f64.ln()).abs() < 1e-14);
    }
}
