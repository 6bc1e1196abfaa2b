use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue kept in predictive covariances.
pub const EIGEN_FLOOR: f64 = 1e-12;

const JITTER_START: f64 = 1e-10;
const JITTER_STEPS: usize = 6;

/// Cholesky factor of `m`, retrying with diagonal jitter `1e-10 * mean(diag)`
/// grown tenfold per failure (six retries). Returns the factor and the jitter
/// that was finally added (0 when the plain factorization succeeded).
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START * mean_diag;
    for _ in 0..JITTER_STEPS {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NumericalFailure(format!(
        "matrix of size {n} is not positive definite after jitter escalation"
    )))
}

/// Symmetrize and floor the eigenvalues of a covariance matrix at [`EIGEN_FLOOR`].
pub fn clamp_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= EIGEN_FLOOR) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}
