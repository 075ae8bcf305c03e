//! Small dense symmetric-positive-definite helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization of an SPD matrix, kept around so a factorization
/// computed once per EM iteration can be shared.
pub struct SpdChol {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    dim: usize,
}

impl SpdChol {
    pub fn new(matrix: &DMatrix<f64>, context: &str) -> Result<Self> {
        let dim = matrix.nrows();
        let chol = Cholesky::new(matrix.clone()).ok_or_else(|| Error::Factorization {
            context: format!("{context}: matrix is not positive definite: {matrix:.6}"),
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { chol, log_det, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular factor L with L L^T = A.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// x^T A^{-1} x via one triangular solve.
    pub fn inv_quadratic(&self, x: &DVector<f64>) -> f64 {
        let mut y = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        y.norm_squared()
    }
}

/// Checks symmetry up to roundoff and returns the symmetrized matrix.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

pub fn require_symmetric(m: &DMatrix<f64>, tol: f64, context: &str) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    let scale = m.norm().max(1.0);
    if asym > tol * scale {
        return Err(Error::invalid(format!(
            "{context}: matrix is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chol_roundtrip() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let f = SpdChol::new(&a, "test").unwrap();
        let l = f.lower();
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
        assert!((f.log_det() - a.determinant().ln()).abs() < 1e-12);
        let x = DVector::from_row_slice(&[1.0, -2.0]);
        let q = f.inv_quadratic(&x);
        let want = (x.transpose() * a.try_inverse().unwrap() * &x)[(0, 0)];
        assert!((q - want).abs() < 1e-12);
    }

    #[test]
    fn chol_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdChol::new(&a, "test").is_err());
    }
}
