//! Symmetric positive-(semi)definite solves with a ridge fallback.
//!
//! Covariance and window Gram matrices are solved here. The happy path is a
//! Cholesky factorization; if the matrix is not numerically positive definite
//! we add `eps * (trace/dim) * I` with `eps` escalating from 1e-8 by factors
//! of 10 up to 1e-4, and as a last resort fall back to a spectral
//! pseudo-inverse with cutoff `1e-10 * lambda_max`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RIDGE_EPS_START: f64 = 1e-8;
const RIDGE_EPS_MAX: f64 = 1e-4;
const PINV_CUTOFF_REL: f64 = 1e-10;

/// Outcome of a symmetric solve `A X = B`.
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: DMatrix<f64>,
    /// Diagonal loading actually added (0 when the plain factorization worked).
    pub ridge_used: f64,
    /// `lambda_max / lambda_min` from the symmetric eigendecomposition;
    /// `f64::INFINITY` when the smallest eigenvalue is not positive.
    pub condition_estimate: f64,
    /// True when the spectral pseudo-inverse fallback was taken.
    pub pseudo_inverse: bool,
}

/// Solves `A X = B` for symmetric PSD `A`, column by column.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<SpdSolution> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "solve_spd: matrix must be square");
    assert_eq!(b.nrows(), n, "solve_spd: rhs row count must match");

    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMoments {
            context: format!("{context}: non-finite entries"),
            condition: f64::INFINITY,
        });
    }

    let eig = a.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let condition_estimate = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };

    if let Some(chol) = nalgebra::Cholesky::new(a.clone()) {
        return Ok(SpdSolution {
            x: chol.solve(b),
            ridge_used: 0.0,
            condition_estimate,
            pseudo_inverse: false,
        });
    }

    let scale = a.trace() / n as f64;
    let mut eps = RIDGE_EPS_START;
    while eps <= RIDGE_EPS_MAX {
        let lambda = eps * scale;
        if lambda > 0.0 {
            let mut loaded = a.clone();
            for i in 0..n {
                loaded[(i, i)] += lambda;
            }
            if let Some(chol) = nalgebra::Cholesky::new(loaded) {
                log::warn!("{context}: ridge {lambda:.3e} added to make the solve factorizable");
                return Ok(SpdSolution {
                    x: chol.solve(b),
                    ridge_used: lambda,
                    condition_estimate,
                    pseudo_inverse: false,
                });
            }
        }
        eps *= 10.0;
    }

    // Spectral pseudo-inverse: invert eigenvalues above the cutoff, zero the rest.
    let cutoff = PINV_CUTOFF_REL * lambda_max.max(0.0);
    let mut inv_vals = DVector::zeros(n);
    let mut any_inverted = false;
    for i in 0..n {
        let v = eig.eigenvalues[i];
        if v > cutoff && v > 0.0 {
            inv_vals[i] = 1.0 / v;
            any_inverted = true;
        }
    }
    let q = &eig.eigenvectors;
    let x = q * DMatrix::from_diagonal(&inv_vals) * q.transpose() * b;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMoments {
            context: context.to_string(),
            condition: condition_estimate,
        });
    }
    if any_inverted {
        log::warn!("{context}: spectral pseudo-inverse used (condition {condition_estimate:.3e})");
    }
    Ok(SpdSolution {
        x,
        ridge_used: 0.0,
        condition_estimate,
        pseudo_inverse: true,
    })
}

/// Convenience wrapper for a vector right-hand side.
pub fn solve_spd_vec(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<(DVector<f64>, SpdSolution)> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let sol = solve_spd(a, &rhs, context)?;
    let x = DVector::from_column_slice(sol.x.as_slice());
    Ok((x, sol))
}

/// Smallest eigenvalue of a symmetric matrix. Used by tests and diagnostics.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_spd_solve_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let sol = solve_spd(&a, &b, "test").unwrap();
        let recon = &a * &sol.x;
        assert!((recon - &b).abs().max() < 1e-12);
        assert_eq!(sol.ridge_used, 0.0);
        assert!(!sol.pseudo_inverse);
        assert!(sol.condition_estimate > 1.0 && sol.condition_estimate < 10.0);
    }

    #[test]
    fn singular_matrix_falls_back() {
        // Rank-1 PSD matrix with a consistent rhs.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let sol = solve_spd(&a, &b, "test").unwrap();
        let recon = &a * &sol.x;
        // Ridge or pinv both keep the residual small on a consistent system.
        assert!((recon - &b).abs().max() < 1e-3);
    }

    #[test]
    fn zero_matrix_gives_zero_solution() {
        let a = DMatrix::zeros(3, 3);
        let b = DMatrix::zeros(3, 2);
        let sol = solve_spd(&a, &b, "test").unwrap();
        assert!(sol.pseudo_inverse);
        assert_eq!(sol.x, DMatrix::zeros(3, 2));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(solve_spd(&a, &b, "test").is_err());
    }
}
