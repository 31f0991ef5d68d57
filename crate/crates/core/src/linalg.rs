//! Small dense linear-algebra helpers shared by the solvers.
//!
//! Everything here works on `DMatrix<f64>`; dimensions in this problem are
//! tiny (n <= 4 or so), so clarity wins over blocking or in-place tricks.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue threshold used by the definiteness predicates.
pub const DEFINITENESS_RTOL: f64 = 1e-10;

/// Singular-value cut-off (relative to the largest one) for ranks and
/// pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-8;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut e: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    e
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

fn extreme_eigenvalues(m: &Mat) -> (f64, f64) {
    let e = sym_eigenvalues(m);
    match (e.first(), e.last()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => (0.0, 0.0),
    }
}

/// Positive definite: min eig > 1e-10 * max(1, max eig).
pub fn is_pd(m: &Mat) -> bool {
    let (lo, hi) = extreme_eigenvalues(m);
    m.iter().all(|v| v.is_finite()) && lo > DEFINITENESS_RTOL * hi.max(1.0)
}

/// Positive semidefinite: min eig > -1e-10 * max(1, max eig).
pub fn is_psd(m: &Mat) -> bool {
    let (lo, hi) = extreme_eigenvalues(m);
    m.iter().all(|v| v.is_finite()) && lo > -DEFINITENESS_RTOL * hi.max(1.0)
}

/// `a ⪰ b` up to an absolute eigenvalue tolerance.
pub fn psd_ge(a: &Mat, b: &Mat, tol: f64) -> bool {
    min_eigenvalue(&(a - b)) >= -tol
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().fold(0.0, |acc: f64, s| acc.max(*s))
}

pub fn trace(m: &Mat) -> f64 {
    m.trace()
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-wise vectorization.
pub fn vec_of(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!("cannot reshape {} entries into {rows}x{cols}", v.len())));
    }
    Ok(Mat::from_column_slice(rows, cols, v))
}

/// Largest real part of the eigenvalues of a general square matrix.
pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    let eig = complex_eigenvalues(m)?;
    Ok(eig.iter().fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re)))
}

pub fn complex_eigenvalues(m: &Mat) -> Result<Vec<nalgebra::Complex<f64>>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to eigen solver".into()));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    if !is_pd(m) {
        return None;
    }
    nalgebra::Cholesky::new(symmetrize(m)).map(|c| c.inverse())
}

/// Number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(a: &Mat, rtol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0, |acc: f64, s| acc.max(*s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rtol * smax).count()
}

/// Least-squares solution through the SVD with relative cut-off `rtol`.
///
/// Fails when `a` does not have full column rank at that cut-off.
pub fn lstsq(a: &Mat, b: &Vector, rtol: f64) -> Result<Vector> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!("least squares: {} rows vs rhs of length {}", a.nrows(), b.len())));
    }
    let cols = a.ncols();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0, |acc: f64, s| acc.max(*s));
    let rank = svd.singular_values.iter().filter(|s| **s > rtol * smax).count();
    if smax == 0.0 || rank < cols {
        return Err(Error::InsufficientExcitation { rank, required: cols });
    }
    svd.solve(b, rtol * smax).map_err(|e| Error::InvalidParameter(e.into()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Relative spectral-norm error `‖est - truth‖₂ / ‖truth‖₂`.
pub fn relative_error(est: &Mat, truth: &Mat) -> f64 {
    let denom = spectral_norm(truth);
    let num = spectral_norm(&(est - truth));
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}
