//! Small dense linear algebra on row-major slices.
//!
//! The ECM inner loop works with k×k and h×h systems where k and h are tiny
//! (typically 3 and 1), so these routines avoid allocation and operate in
//! place on caller-owned buffers. `nalgebra` is used for everything outside
//! the hot path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// In-place lower Cholesky factorization of an `n×n` symmetric matrix.
///
/// On success the lower triangle of `a` holds `L` with `A = L Lᵀ`; the strict
/// upper triangle is left untouched. On failure returns the index of the
/// first pivot that was not positive relative to the diagonal scale.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    debug_assert_eq!(a.len(), n * n);
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0_f64, f64::max);
    let floor = scale * 1e-13;
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > floor) {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky_in_place`].
pub(crate) fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in (i + 1)..n {
            s -= l[p * n + i] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `A X = B` in place by Gaussian elimination with partial pivoting.
///
/// `a` is `n×n`, `b` is `n×m` (row-major); both are overwritten and `b`
/// receives the solution. Returns `log|det A|`, or `None` when `A` is singular.
pub(crate) fn lu_solve_in_place(a: &mut [f64], n: usize, b: &mut [f64], m: usize) -> Option<f64> {
    let mut log_det = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            for c in 0..m {
                b.swap(col * m + c, piv * m + c);
            }
        }
        let d = a[col * n + col];
        log_det += d.abs().ln();
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            for c in 0..m {
                b[r * m + c] -= f * b[col * m + c];
            }
        }
    }
    for r in (0..n).rev() {
        let d = a[r * n + r];
        for c in 0..m {
            let mut s = b[r * m + c];
            for p in (r + 1)..n {
                s -= a[r * n + p] * b[p * m + c];
            }
            b[r * m + c] = s / d;
        }
    }
    Some(log_det)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(chol.inverse())
}

/// Symmetrizes in place by averaging with the transpose.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Whether a symmetric matrix is positive semidefinite up to `tol` (relative to its scale).
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let scale = m.amax().max(1.0);
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -tol * scale)
}

/// Ordinary least squares via the normal equations, with the collinear column
/// reported on failure.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let k = x.ncols();
    let xtx = x.transpose() * x;
    let mut a: Vec<f64> = (0..k * k).map(|i| xtx[(i / k, i % k)]).collect();
    cholesky_in_place(&mut a, k).map_err(|column| Error::RankDeficient { column })?;
    let xty = x.transpose() * y;
    let mut b: Vec<f64> = xty.iter().copied().collect();
    cholesky_solve_in_place(&a, k, &mut b);
    Ok(DVector::from_vec(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_solves_spd_system() {
        let mut a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let orig = DMatrix::from_row_slice(3, 3, &a);
        cholesky_in_place(&mut a, 3).unwrap();
        let mut b = vec![1.0, -2.0, 0.5];
        cholesky_solve_in_place(&a, 3, &mut b);
        let x = DVector::from_vec(b);
        let r = &orig * &x - DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn cholesky_reports_collinear_column() {
        // third column = first + second
        let x = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 1., 2., 1., 2., 3., 1., 3., 4.]);
        match ols(&x, &DVector::from_element(4, 1.0)) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, 2),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn lu_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.5, 2.0]);
        let mut a: Vec<f64> = m.transpose().iter().copied().collect();
        let mut b = vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0];
        let log_det = lu_solve_in_place(&mut a, 3, &mut b, 2).unwrap();
        assert_relative_eq!(log_det, m.determinant().abs().ln(), epsilon = 1e-12);
        let x = DMatrix::from_row_slice(3, 2, &b);
        let rhs = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        assert!((&m * x - rhs).amax() < 1e-12);
    }

    #[test]
    fn psd_check() {
        assert!(is_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), 1e-12));
        assert!(!is_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 1e-12));
    }
}
