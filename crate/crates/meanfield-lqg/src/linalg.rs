//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::{Error, Result};

/// Symmetric part (M + M') / 2.
pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(m.nrows(), m.ncols());
    sym_part(m).symmetric_eigen().eigenvalues.max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(m.nrows(), m.ncols());
    sym_part(m).symmetric_eigen().eigenvalues.min()
}

/// Cholesky factorization of a symmetric positive-definite matrix, with the
/// failure surfaced as a typed error naming the weighting and grid node.
pub fn spd_factor(m: &DMatrix<f64>, name: &str, node: usize, t: f64) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(sym_part(m)).ok_or_else(|| Error::NotPositiveDefinite {
        name: name.into(),
        node,
        t,
    })
}

/// Dense LU solve of `a * x = b` with a 1-norm condition estimate; condition
/// numbers above `cond_limit` are treated as leaving the well-posed regime.
pub fn lu_solve_checked(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    name: &str,
    node: usize,
    cond_limit: f64,
) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    let singular = || Error::SingularSolve {
        name: name.into(),
        node,
        cond: f64::INFINITY,
    };
    let inv = lu.try_inverse().ok_or_else(singular)?;
    let cond = one_norm(a) * one_norm(&inv);
    if !cond.is_finite() || cond > cond_limit {
        return Err(Error::SingularSolve {
            name: name.into(),
            node,
            cond,
        });
    }
    Ok(&inv * b)
}

/// Matrix 1-norm (maximum absolute column sum).
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|x| x.abs()).sum();
        worst = worst.max(s);
    }
    worst
}

/// Frobenius norm of the difference of two equally shaped matrices.
pub fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

/// True when every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_norm_of_diag_is_max_abs() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -5.0, 1.0]));
        assert_relative_eq!(spectral_norm(&m), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn spectral_norm_single_entry() {
        let mut m = DMatrix::zeros(4, 6);
        m[(2, 3)] = -7.5;
        assert_relative_eq!(spectral_norm(&m), 7.5, max_relative = 1e-12);
    }

    #[test]
    fn sym_eigenvalue_bounds() {
        // Nonsymmetric with skew part: sym part is [[1, 0], [0, -3]].
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, -3.0]);
        assert_relative_eq!(max_sym_eigenvalue(&m), 1.0, max_relative = 1e-12);
        assert_relative_eq!(min_sym_eigenvalue(&m), -3.0, max_relative = 1e-12);
    }

    #[test]
    fn spd_factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_factor(&m, "R", 3, 0.5).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(spd_factor(&ok, "R", 3, 0.5).is_ok());
    }

    #[test]
    fn lu_solve_flags_singular_and_ill_conditioned() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DMatrix::identity(2, 2);
        assert!(lu_solve_checked(&singular, &b, "test", 0, 1e12).is_err());

        let ill = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(lu_solve_checked(&ill, &b, "test", 0, 1e12).is_err());

        let fine = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 2.0, 3.0]);
        let x = lu_solve_checked(&fine, &b, "test", 0, 1e12).unwrap();
        assert_relative_eq!((&fine * &x - &b).norm(), 0.0, epsilon = 1e-12);
    }
}
