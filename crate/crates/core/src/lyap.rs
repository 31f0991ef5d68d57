//! Generalized Lyapunov operators on the space of symmetric matrices.
//!
//! For a closed loop `dx = F x dt + H x dw` the operator is
//! `ℒ(P) = FᵀP + PF + HᵀPH`; its adjoint is `ℒ*(P) = FP + PFᵀ + HPHᵀ`.
//! Mean-square stability of the closed loop is equivalent to the spectrum
//! of `ℒ` lying in the open left half-plane. We represent `ℒ` by its matrix
//! on the half-vectorization `vecm`, which has size `n(n+1)/2`.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{Complex, DMatrix, Normed, LU};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::SystemModel;

/// Real part threshold below which a spectrum counts as stable.
pub const STABILITY_MARGIN: f64 = -1e-9;
/// Tolerance of the exact-detectability eigen-test.
pub const DETECTABILITY_TOL: f64 = 1e-9;

/// Half-vectorization of symmetric `n × n` matrices, row-major upper
/// triangle: `[p11, p12, …, p1n, p22, …, pnn]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymmetricCodec {
    n: usize,
}

impl SymmetricCodec {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// Codec whose vector length is `len`, if `len` is triangular.
    pub fn for_len(len: usize) -> Option<Self> {
        let mut n = 0;
        while n * (n + 1) / 2 < len {
            n += 1;
        }
        (n * (n + 1) / 2 == len).then_some(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    /// Pairs `(i, j)` with `i <= j` in basis order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (i..self.n).map(move |j| (i, j)))
    }

    pub fn encode(&self, p: &Mat) -> Result<Vector> {
        if p.nrows() != self.n || p.ncols() != self.n {
            return Err(Error::Dimension(format!("vecm expects {0}x{0}", self.n)));
        }
        let asym = linalg::asymmetry(p);
        if asym > 1e-12 * (1.0 + p.norm()) {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(self.encode_upper(p))
    }

    /// Reads the upper triangle without a symmetry check.
    pub fn encode_upper(&self, p: &Mat) -> Vector {
        Vector::from_iterator(self.dim(), self.pairs().map(|(i, j)| p[(i, j)]))
    }

    pub fn decode(&self, v: &[f64]) -> Result<Mat> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!("unvecm expects {} entries, got {}", self.dim(), v.len())));
        }
        let mut p = Mat::zeros(self.n, self.n);
        for ((i, j), value) in self.pairs().zip(v.iter()) {
            p[(i, j)] = *value;
            p[(j, i)] = *value;
        }
        Ok(p)
    }

    /// Symmetric basis element `E_ij` (ones at `(i,j)` and `(j,i)`).
    pub fn basis(&self, index: usize) -> Mat {
        let (i, j) = self.pairs().nth(index).expect("basis index in range");
        let mut e = Mat::zeros(self.n, self.n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    }

    /// `vecm(2xxᵀ - diag(x)²)`, the feature with `xᵀPx = feature·vecm(P)`.
    pub fn quadratic_feature(&self, x: &[f64]) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.pairs().map(|(i, j)| if i == j { x[i] * x[i] } else { 2.0 * x[i] * x[j] }),
        )
    }

    /// Same feature computed from a second-moment matrix `X = E[xxᵀ]`.
    pub fn moment_feature(&self, second_moment: &Mat) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.pairs().map(|(i, j)| {
                if i == j {
                    second_moment[(i, i)]
                } else {
                    second_moment[(i, j)] + second_moment[(j, i)]
                }
            }),
        )
    }
}

pub fn vecm(p: &Mat) -> Result<Vector> {
    SymmetricCodec::new(p.nrows()).encode(p)
}

pub fn unvecm(v: &[f64]) -> Result<Mat> {
    SymmetricCodec::for_len(v.len())
        .ok_or_else(|| Error::Dimension(format!("{} is not a triangular number", v.len())))?
        .decode(v)
}

/// `ℒ(P) = FᵀP + PF + HᵀPH` with `F = A - BK + GL`, `H = C - DK`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedLyapunov {
    drift: Mat,
    diffusion: Option<Mat>,
}

impl GeneralizedLyapunov {
    pub fn from_parts(drift: Mat, diffusion: Option<Mat>) -> Self {
        Self { drift, diffusion }
    }

    /// Closed-loop operator of `sys` under `u = -Kx`, `v = Lx`.
    ///
    /// With `deterministic` the diffusion `C - DK` is dropped.
    pub fn new(sys: &SystemModel, k: &Mat, l: &Mat, deterministic: bool) -> Result<Self> {
        let n = sys.n();
        if k.nrows() != sys.m1() || k.ncols() != n {
            return Err(Error::Dimension(format!("K must be {}x{n}", sys.m1())));
        }
        if l.nrows() != sys.m2() || l.ncols() != n {
            return Err(Error::Dimension(format!("L must be {}x{n}", sys.m2())));
        }
        let drift = &sys.a - &sys.b * k + &sys.g * l;
        let diffusion = (!deterministic).then(|| &sys.c - &sys.d * k);
        Ok(Self { drift, diffusion })
    }

    pub fn n(&self) -> usize {
        self.drift.nrows()
    }

    pub fn drift(&self) -> &Mat {
        &self.drift
    }

    pub fn diffusion(&self) -> Option<&Mat> {
        self.diffusion.as_ref()
    }

    pub fn apply(&self, p: &Mat) -> Mat {
        let mut out = self.drift.transpose() * p + p * &self.drift;
        if let Some(h) = &self.diffusion {
            out += h.transpose() * p * h;
        }
        linalg::symmetrize(&out)
    }

    pub fn apply_adjoint(&self, p: &Mat) -> Mat {
        let mut out = &self.drift * p + p * self.drift.transpose();
        if let Some(h) = &self.diffusion {
            out += h * p * h.transpose();
        }
        linalg::symmetrize(&out)
    }

    fn matrix_of(&self, f: impl Fn(&Mat) -> Mat) -> Mat {
        let codec = SymmetricCodec::new(self.n());
        let dim = codec.dim();
        let mut m = Mat::zeros(dim, dim);
        for col in 0..dim {
            let image = codec.encode_upper(&f(&codec.basis(col)));
            m.set_column(col, &image);
        }
        m
    }

    /// Matrix `M` with `vecm(ℒ(P)) = M vecm(P)`.
    pub fn matrix(&self) -> Mat {
        self.matrix_of(|p| self.apply(p))
    }

    pub fn adjoint_matrix(&self) -> Mat {
        self.matrix_of(|p| self.apply_adjoint(p))
    }

    pub fn spectrum(&self) -> Result<Vec<Complex<f64>>> {
        linalg::complex_eigenvalues(&self.matrix())
    }

    pub fn spectral_abscissa(&self) -> Result<f64> {
        linalg::spectral_abscissa(&self.matrix())
    }

    pub fn is_ms_stable(&self) -> Result<bool> {
        Ok(self.spectral_abscissa()? < STABILITY_MARGIN)
    }

    /// Solves `ℒ(P) + W = 0`.
    pub fn solve(&self, w: &Mat) -> Result<Mat> {
        let codec = SymmetricCodec::new(self.n());
        let rhs = -codec.encode(&linalg::symmetrize(w))?;
        let m = self.matrix();
        let scale = m.amax().max(1.0);
        let lu = LU::new(m);
        let det_scale = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
        if !(det_scale > 1e-13 * scale) {
            return Err(Error::OperatorSingular);
        }
        let x = lu.solve(&rhs).ok_or(Error::OperatorSingular)?;
        codec.decode(x.as_slice()).map(|p| linalg::symmetrize(&p))
    }
}

/// Exact detectability of `[A, Q | C]` (or plain detectability of `(A, Q)`
/// when `c` is `None`): no eigen-matrix `P ≠ 0` of the open-loop operator
/// with `Re λ ≥ 0` satisfies `QP = 0`.
///
/// Only ordinary eigenvectors are examined; Jordan chains of a defective
/// operator are not searched.
pub fn check_detectability(a: &Mat, c: Option<&Mat>, q: &Mat) -> Result<bool> {
    let op = GeneralizedLyapunov::from_parts(a.clone(), c.cloned());
    let codec = SymmetricCodec::new(op.n());
    let m = op.matrix();
    let dim = codec.dim();
    let eig = linalg::complex_eigenvalues(&m)?;
    let mut seen: Vec<Complex<f64>> = Vec::new();
    let scale = m.amax().max(1.0);
    for lambda in eig.into_iter().filter(|z| z.re >= STABILITY_MARGIN) {
        if seen.iter().any(|s| (s - lambda).norm() < 1e-7 * scale) {
            continue;
        }
        seen.push(lambda);
        let shifted: DMatrix<Complex<f64>> = DMatrix::from_fn(dim, dim, |i, j| {
            let v = Complex::new(m[(i, j)], 0.0);
            if i == j {
                v - lambda
            } else {
                v
            }
        });
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or(Error::EigenFailure)?;
        let smax = svd.singular_values.iter().fold(0.0f64, |acc, s| acc.max(*s));
        let smin = svd.singular_values.iter().fold(f64::INFINITY, |acc, s| acc.min(*s));
        let null_tol = (1e-7 * smax.max(1.0)).max(smin * (1.0 + 1e-12));
        let null_rows: Vec<usize> =
            (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] <= null_tol).collect();
        // Columns of the eigenspace basis, as complex symmetric matrices.
        let basis: Vec<DMatrix<Complex<f64>>> = null_rows
            .iter()
            .map(|&r| {
                let v: Vec<Complex<f64>> = (0..dim).map(|c| v_t[(r, c)].conj()).collect();
                decode_complex(&codec, &v)
            })
            .collect();
        if min_annihilation_ratio(&basis, q) <= DETECTABILITY_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Exact detectability of `[A, Q | C]` for the model's `A` and `C`.
pub fn check_exact_detectability(sys: &SystemModel, q: &Mat) -> Result<bool> {
    check_detectability(&sys.a, Some(&sys.c), q)
}

fn decode_complex(codec: &SymmetricCodec, v: &[Complex<f64>]) -> DMatrix<Complex<f64>> {
    let n = codec.n();
    let mut p = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for ((i, j), value) in codec.pairs().zip(v.iter()) {
        p[(i, j)] = *value;
        p[(j, i)] = *value;
    }
    p
}

/// `min ‖Q P‖_F / ‖P‖_F` over `P` in the span of `basis`; real and
/// imaginary parts enter through the complex Frobenius norm.
fn min_annihilation_ratio(basis: &[DMatrix<Complex<f64>>], q: &Mat) -> f64 {
    if basis.is_empty() {
        return f64::INFINITY;
    }
    let n = q.nrows();
    let qc: DMatrix<Complex<f64>> = q.map(|v| Complex::new(v, 0.0));
    let r = basis.len();
    let mut u = DMatrix::from_element(n * n, r, Complex::new(0.0, 0.0));
    let mut z = DMatrix::from_element(n * n, r, Complex::new(0.0, 0.0));
    for (col, p) in basis.iter().enumerate() {
        let qp = &qc * p;
        for idx in 0..n * n {
            u[(idx, col)] = p.as_slice()[idx];
            z[(idx, col)] = qp.as_slice()[idx];
        }
    }
    if r == 1 {
        let nu = u.norm();
        return if nu == 0.0 { f64::INFINITY } else { z.norm() / nu };
    }
    let qr = u.qr();
    let Some(r_inv) = qr.r().try_inverse() else {
        return f64::INFINITY;
    };
    let w = z * r_inv;
    w.svd(false, false).singular_values.iter().fold(f64::INFINITY, |acc, s| acc.min(*s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, c: f64) -> GeneralizedLyapunov {
        GeneralizedLyapunov::from_parts(Mat::from_element(1, 1, a), Some(Mat::from_element(1, 1, c)))
    }

    #[test]
    fn vecm_examples() {
        let p = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(vecm(&p).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(vecm(&Mat::identity(3, 3)).unwrap().as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(unvecm(&[1.0, 2.0, 3.0]).unwrap(), p);
    }

    #[test]
    fn vecm_rejects_asymmetric() {
        let p = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 3.0]);
        assert!(matches!(vecm(&p), Err(Error::NotSymmetric(_))));
        assert!(unvecm(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn quadratic_feature_matches_quadratic_form() {
        let codec = SymmetricCodec::new(3);
        let x = [0.3, -1.2, 2.0];
        let p = Mat::from_row_slice(3, 3, &[2.0, 0.5, -0.1, 0.5, 1.0, 0.7, -0.1, 0.7, 3.0]);
        let xv = Vector::from_column_slice(&x);
        let quad = (xv.transpose() * &p * &xv)[(0, 0)];
        let feat = codec.quadratic_feature(&x).dot(&codec.encode(&p).unwrap());
        assert!((quad - feat).abs() < 1e-12);
    }

    #[test]
    fn scalar_apply() {
        assert_eq!(scalar(-1.0, 0.0).apply(&Mat::from_element(1, 1, 1.0))[(0, 0)], -2.0);
        assert!((scalar(-1.0, 0.5).apply(&Mat::from_element(1, 1, 1.0))[(0, 0)] + 1.75).abs() < 1e-15);
        assert_eq!(scalar(-1.0, 0.5).apply(&Mat::zeros(1, 1))[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_operator_matrix_closed_form() {
        let one = |v: f64| Mat::from_element(1, 1, v);
        let sys = SystemModel::new(one(0.4), one(1.5), one(0.7), one(0.3), one(0.2));
        let (k, l) = (one(0.9), one(-0.4));
        let op = GeneralizedLyapunov::new(&sys, &k, &l, false).unwrap();
        let expected = 2.0 * (0.4 - 1.5 * 0.9 + 0.7 * -0.4) + (0.3f64 - 0.2 * 0.9).powi(2);
        assert!((op.matrix()[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn doubled_identity() {
        let op = GeneralizedLyapunov::from_parts(Mat::identity(2, 2), None);
        assert_eq!(op.matrix(), Mat::identity(3, 3) * 2.0);
    }

    #[test]
    fn scalar_abscissa_and_stability() {
        assert_eq!(scalar(-1.0, 0.0).spectral_abscissa().unwrap(), -2.0);
        assert!(scalar(-1.0, 0.0).is_ms_stable().unwrap());
        assert!(!scalar(1.0, 0.0).is_ms_stable().unwrap());
        let noisy = scalar(-0.1, 0.5);
        assert!((noisy.spectral_abscissa().unwrap() - 0.05).abs() < 1e-14);
        assert!(!noisy.is_ms_stable().unwrap());
    }

    #[test]
    fn scalar_solve() {
        let p = scalar(-1.0, 0.5).solve(&Mat::from_element(1, 1, 1.0)).unwrap();
        assert!((p[(0, 0)] - 1.0 / 1.75).abs() < 1e-15);
        let z = scalar(-1.0, 0.5).solve(&Mat::zeros(1, 1)).unwrap();
        assert_eq!(z[(0, 0)], 0.0);
    }

    #[test]
    fn singular_operator_is_reported() {
        let op = GeneralizedLyapunov::from_parts(Mat::zeros(1, 1), None);
        assert_eq!(op.solve(&Mat::from_element(1, 1, 1.0)), Err(Error::OperatorSingular));
    }

    #[test]
    fn detectability_cases() {
        let one = |v: f64| Mat::from_element(1, 1, v);
        assert!(check_detectability(&one(1.0), Some(&one(0.0)), &one(1.0)).unwrap());
        assert!(!check_detectability(&one(1.0), Some(&one(0.0)), &one(0.0)).unwrap());
        // Unstable mode hidden from Q in the second coordinate.
        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]);
        let q = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(!check_detectability(&a, None, &q).unwrap());
        let q_full = Mat::identity(2, 2);
        assert!(check_detectability(&a, None, &q_full).unwrap());
    }

    #[test]
    fn complex_mode_detectability() {
        // Rotation with positive real part, observed through Q = e1 e1ᵀ.
        let a = Mat::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.1]);
        let q = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(check_detectability(&a, None, &q).unwrap());
        assert!(!check_detectability(&a, None, &Mat::zeros(2, 2)).unwrap());
    }
}
