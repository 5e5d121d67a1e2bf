//! Dense linear-algebra helpers shared by every module: discounted Lyapunov
//! solves, spectral radius, pseudoinverse and semidefinite checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};

/// A map counts as strictly stabilising when its spectral radius is below
/// `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Relative singular-value cutoff for rank decisions and pseudoinverses.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Largest state dimension solved through the Kronecker system; larger
/// problems use Smith doubling.
pub const KRONECKER_MAX_DIM: usize = 50;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(SmpcError::dim(
            "matrix rows",
            "matrix columns",
            format!("spectral radius needs a square matrix, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SmpcError::numerical("spectral_radius", "non-finite entry"));
    }
    let schur = m
        .clone()
        .try_schur(EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| SmpcError::numerical("spectral_radius", "Schur iteration did not converge"))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Solves `P = scale * Phi^T P Phi + S` for the discounted Lyapunov matrix.
///
/// `P` equals the series `sum_j scale^j (Phi^T)^j S Phi^j`, which converges
/// only if `sqrt(scale) * Phi` is strictly stable.
pub fn solve_discounted_lyapunov(
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    scale: f64,
) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    if !phi.is_square() || s.shape() != (n, n) {
        return Err(SmpcError::dim(
            "Phi",
            "S",
            format!("Phi is {:?}, S is {:?}", phi.shape(), s.shape()),
        ));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(SmpcError::numerical(
            "solve_discounted_lyapunov",
            format!("scale {scale} outside (0, 1]"),
        ));
    }
    let radius = spectral_radius(phi)? * scale.sqrt();
    if radius >= 1.0 - STABILITY_MARGIN {
        return Err(SmpcError::Divergence { radius });
    }

    let mut p = if n <= KRONECKER_MAX_DIM {
        kronecker_solve(phi, s, scale)?
    } else {
        smith_doubling(phi, s, scale)
    };
    symmetrize(&mut p);

    let residual = lyapunov_residual(phi, s, scale, &p);
    if !residual.is_finite() || residual > 1e-8 * (1.0 + p.norm()) {
        return Err(SmpcError::numerical(
            "solve_discounted_lyapunov",
            format!("residual {residual:e} too large"),
        ));
    }
    Ok(p)
}

/// `||P - scale Phi^T P Phi - S||_F`.
pub fn lyapunov_residual(phi: &DMatrix<f64>, s: &DMatrix<f64>, scale: f64, p: &DMatrix<f64>) -> f64 {
    (p - phi.transpose() * p * phi * scale - s).norm()
}

fn kronecker_solve(phi: &DMatrix<f64>, s: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    // Column-major vec: vec(Phi^T P Phi) = (Phi^T kron Phi^T) vec(P).
    let phit = phi.transpose();
    let mut system = phit.kronecker(&phit) * (-scale);
    for i in 0..n * n {
        system[(i, i)] += 1.0;
    }
    let rhs = DVector::from_column_slice(s.as_slice());
    let vec_p = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SmpcError::numerical("solve_discounted_lyapunov", "singular Kronecker system"))?;
    Ok(DMatrix::from_column_slice(n, n, vec_p.as_slice()))
}

fn smith_doubling(phi: &DMatrix<f64>, s: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut a = phi * scale.sqrt();
    let mut p = s.clone();
    for _ in 0..64 {
        let increment = a.transpose() * &p * &a;
        let done = increment.norm() <= f64::EPSILON * p.norm();
        p += increment;
        if done {
            break;
        }
        a = &a * &a;
    }
    p
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Eigenvalues of a symmetric matrix (the input is symmetrised first).
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(SmpcError::numerical("symmetric_eigenvalues", "non-finite entry"));
    }
    sym.try_symmetric_eigen(EIG_EPS, EIG_MAX_ITER)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| SmpcError::numerical("symmetric_eigenvalues", "eigen iteration did not converge"))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym
        .try_symmetric_eigen(EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| SmpcError::numerical("psd_sqrt", "eigen iteration did not converge"))?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SmpcError::numerical("svd", "non-finite entry"));
    }
    m.clone()
        .try_svd(false, false, EIG_EPS, EIG_MAX_ITER)
        .map(|svd| svd.singular_values)
        .ok_or_else(|| SmpcError::numerical("svd", "SVD iteration did not converge"))
}

/// Numerical rank with cutoff `RANK_CUTOFF * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let sv = singular_values(m)?;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > RANK_CUTOFF * smax).count())
}

/// Moore-Penrose pseudoinverse; singular values below `RANK_CUTOFF * sigma_max`
/// are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SmpcError::numerical("pseudo_inverse", "non-finite entry"));
    }
    let svd = m
        .clone()
        .try_svd(true, true, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| SmpcError::numerical("pseudo_inverse", "SVD iteration did not converge"))?;
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let cutoff = RANK_CUTOFF * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let inv_s = svd.singular_values.map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
    Ok(vt.transpose() * DMatrix::from_diagonal(&inv_s) * u.transpose())
}

/// `x^T M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Integer matrix power by repeated multiplication (exponents are horizon-sized).
pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_radius_basics() {
        assert_relative_eq!(spectral_radius(&DMatrix::identity(2, 2)).unwrap(), 1.0, epsilon = 1e-12);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(spectral_radius(&nil).unwrap() < 1e-12);
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn spectral_radius_of_tank_matrix_matches_characteristic_polynomial() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8207, 0.04, 0.0799, 0.7808]);
        // Roots of l^2 - tr l + det.
        let tr: f64 = 0.8207 + 0.7808;
        let det = 0.8207 * 0.7808 - 0.04 * 0.0799;
        let disc = (tr * tr - 4.0 * det).sqrt();
        let expected = ((tr + disc) / 2.0).abs().max(((tr - disc) / 2.0).abs());
        let rho = spectral_radius(&a).unwrap();
        assert_relative_eq!(rho, expected, max_relative = 1e-10);
        assert!(rho > 0.0 && rho < 1.0);
    }

    #[test]
    fn scalar_lyapunov_geometric_series() {
        let phi = DMatrix::from_element(1, 1, 0.5);
        let s = DMatrix::from_element(1, 1, 1.0);
        let p = solve_discounted_lyapunov(&phi, &s, 0.9).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 / (1.0 - 0.225), epsilon = 1e-12);
        let p = solve_discounted_lyapunov(&phi, &s, 1.0).unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn nilpotent_lyapunov_returns_source() {
        let phi = DMatrix::zeros(3, 3);
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 3.0]);
        let p = solve_discounted_lyapunov(&phi, &s, 1.0).unwrap();
        assert_relative_eq!(p, s, epsilon = 1e-14);
    }

    #[test]
    fn unstable_map_is_rejected() {
        let phi = DMatrix::from_element(1, 1, 1.2);
        let s = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_discounted_lyapunov(&phi, &s, 0.5),
            Ok(_)
        ));
        assert!(matches!(
            solve_discounted_lyapunov(&phi, &s, 0.9),
            Err(SmpcError::Divergence { .. })
        ));
    }

    #[test]
    fn smith_doubling_agrees_with_kronecker() {
        let phi = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.4, 0.3, 0.0, 0.1, 0.6]);
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]);
        let a = kronecker_solve(&phi, &s, 0.95).unwrap();
        let b = smith_doubling(&phi, &s, 0.95);
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn pseudo_inverse_of_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pseudo_inverse(&m).unwrap();
        assert_relative_eq!(p, DMatrix::from_element(2, 2, 0.25), epsilon = 1e-14);
        assert_eq!(numerical_rank(&m).unwrap(), 1);
    }
}
