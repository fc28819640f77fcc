//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MemoeError, Result};

/// Eigenvalue floor used when a symmetric positive-definite factorization fails.
pub const SPD_EIG_FLOOR: f64 = 1e-10;

/// Inverse and log-determinant of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
    /// Set when Cholesky failed and eigenvalues had to be floored.
    pub floored: bool,
}

/// Factor a symmetric matrix that should be positive definite. Cholesky is tried
/// first; on failure the eigenvalues are floored at `eig_floor`.
pub fn spd_factor(m: &DMatrix<f64>, eig_floor: f64) -> SpdFactor {
    if let Some(chol) = m.clone().cholesky() {
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        if log_det.is_finite() {
            return SpdFactor {
                inverse: chol.inverse(),
                log_det,
                floored: false,
            };
        }
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(eig_floor));
    let inv_diag = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v));
    let inverse = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    SpdFactor {
        inverse: symmetrize(&inverse),
        log_det: vals.iter().map(|v| v.ln()).sum(),
        floored: true,
    }
}

/// Solve `a x = b` for symmetric positive semi-definite `a`. When Cholesky fails a
/// ridge of `1e-10 * trace / n` is added; the flag reports whether that happened.
pub fn solve_spd_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return (x, false);
        }
    }
    let n = a.nrows();
    let scale = (a.trace() / n as f64).abs().max(1.0);
    let mut ridge = 1e-10 * scale;
    loop {
        let mut ar = a.clone();
        for i in 0..n {
            ar[(i, i)] += ridge;
        }
        if let Some(chol) = ar.cholesky() {
            return (chol.solve(b), true);
        }
        ridge *= 10.0;
        if ridge > scale * 1e6 {
            return (pseudo_inverse(a) * b, true);
        }
    }
}

/// Inverse of a symmetric positive semi-definite matrix, with the same ridge fallback.
pub fn inverse_spd_ridge(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        let inv = chol.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (inv, false);
        }
    }
    let scale = (a.trace() / n as f64).abs().max(1.0);
    let mut ar = a.clone();
    for i in 0..n {
        ar[(i, i)] += 1e-10 * scale;
    }
    match ar.cholesky() {
        Some(chol) => (chol.inverse(), true),
        None => (pseudo_inverse(a), true),
    }
}

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize and clamp eigenvalues from below.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Pairwise (cascade) summation in fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `a^T M a` for square `M`.
pub fn quad_form(m: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for c in 0..n {
        let mut col = 0.0;
        for r in 0..n {
            col += m[(r, c)] * a[r];
        }
        total += col * a[c];
    }
    total
}

/// `m.row(r) · v` without materializing the row.
#[inline]
pub fn row_dot(m: &DMatrix<f64>, r: usize, v: &DVector<f64>) -> f64 {
    (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum()
}

pub fn check_square(m: &DMatrix<f64>, n: usize, name: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(MemoeError::Dimension(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_factor_matches_direct() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = spd_factor(&m, SPD_EIG_FLOOR);
        assert!(!f.floored);
        assert_relative_eq!(f.log_det, 11.0f64.ln(), epsilon = 1e-14);
        let id = &m * &f.inverse;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn spd_factor_floors_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let f = spd_factor(&m, 1e-10);
        assert!(f.floored);
        assert_relative_eq!(f.log_det, 1e-10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ridge_solve_handles_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let (x, ridged) = solve_spd_ridge(&a, &b);
        assert!(ridged);
        assert_relative_eq!((&a * &x - &b).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1001).map(|i| (i as f64).sin()).collect();
        assert_relative_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_large_magnitudes() {
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn eigen_floor_applied() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        let f = floor_eigenvalues(&m, 1e-8);
        assert!(min_eigenvalue(&f) >= 1e-8 - 1e-20);
    }
}
