//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest absolute entry of `m + mᵀ`.
pub fn skew_residual(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] + m[(j, i)]).abs());
        }
    }
    worst
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Largest eigenvalue magnitude of the symmetric part of `m`.
pub fn spectral_radius_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().amax()
}

/// Checks that `m` is square, symmetric and positive definite.
pub fn require_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Config(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if asymmetry(m) > 1e-12 * scale {
        return Err(Error::Config(format!("{what} is not symmetric")));
    }
    if m.clone().cholesky().is_none() || min_eigenvalue(m) <= 0.0 {
        return Err(Error::Config(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    require_spd(m, what)?;
    Ok(m.clone().cholesky().expect("checked SPD").l())
}

/// A factor `L` with `L Lᵀ = m` for a symmetric PSD matrix: Cholesky when
/// `m` is SPD, the symmetric square root otherwise.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Ok(l) = cholesky_lower(m, what) {
        return Ok(l);
    }
    if asymmetry(m) > 1e-12 || min_eigenvalue(m) < -1e-12 {
        return Err(Error::Config(format!("{what} is not positive semidefinite")));
    }
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Inverse of an SPD matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    require_spd(m, what)?;
    Ok(m.clone().cholesky().expect("checked SPD").inverse())
}

pub fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_checks() {
        assert!(require_spd(&DMatrix::identity(3, 3), "I").is_ok());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(require_spd(&indefinite, "A").is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(require_spd(&asym, "B").is_err());
    }

    #[test]
    fn residuals() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(skew_residual(&q), 0.0);
        assert_eq!(asymmetry(&q), 2.0);
        assert!((min_eigenvalue(&DMatrix::from_diagonal_element(2, 2, 0.5)) - 0.5).abs() < 1e-15);
    }
}
