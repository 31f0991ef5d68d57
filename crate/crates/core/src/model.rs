//! Agent dynamics, social cost weights and the constant matrices derived from
//! them.
//!
//! Each agent follows
//!
//! ```text
//! dx = (A x + B u + G v) dt + (C x + D u) dw
//! ```
//!
//! with control `u` (dimension `m1`) and disturbance `v` (dimension `m2`).
//! The social cost couples agents through `Γ` and the attenuation level `γ`
//! weights the disturbance energy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// The quintuple `[A, B, G | C, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: Mat,
    pub b: Mat,
    pub g: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl SystemModel {
    pub fn new(a: Mat, b: Mat, g: Mat, c: Mat, d: Mat) -> Self {
        Self { a, b, g, c, d }
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension.
    pub fn m1(&self) -> usize {
        self.b.ncols()
    }

    /// Disturbance dimension.
    pub fn m2(&self) -> usize {
        self.g.ncols()
    }

    /// Same drift, no multiplicative noise.
    pub fn without_noise(&self) -> Self {
        let n = self.n();
        Self { c: Mat::zeros(n, n), d: Mat::zeros(n, self.m1()), ..self.clone() }
    }
}

/// Weights of the robust social cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// State weight `Q ⪰ 0`.
    pub q: Mat,
    /// Control weight `R ≻ 0`.
    pub r: Mat,
    /// Population coupling `Γ`.
    pub coupling: Mat,
    /// Attenuation level `γ > 0`.
    pub gamma: f64,
}

impl CostSpec {
    pub fn new(q: Mat, r: Mat, coupling: Mat, gamma: f64) -> Self {
        Self { q, r, coupling, gamma }
    }

    pub fn gamma_sq(&self) -> f64 {
        self.gamma * self.gamma
    }
}

/// Constant matrices that depend on the stochastic solution `P*`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedCost {
    /// `Υ = R + Dᵀ P* D`.
    pub upsilon: Mat,
    /// `A_s = A - B Υ⁻¹ Dᵀ P* C`.
    pub a_s: Mat,
    /// `Q_Γ = -ΓᵀQΓ + ΓᵀQ + QΓ`.
    pub q_gamma: Mat,
    /// Weight of the deterministic (mean-field) Riccati equation.
    pub q_s: Mat,
}

/// Feedback gains of the control and disturbance teams.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPair {
    /// `m1 × n`.
    pub control: Mat,
    /// `m2 × n`.
    pub disturbance: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimension(String),
    NonFinite(&'static str),
    NotSymmetric(&'static str),
    QNotPsd,
    RNotPd,
    GammaNotPositive,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension(s) => write!(f, "dimension mismatch: {s}"),
            Violation::NonFinite(name) => write!(f, "{name} has non-finite entries"),
            Violation::NotSymmetric(name) => write!(f, "{name} not symmetric"),
            Violation::QNotPsd => write!(f, "Q not positive semidefinite"),
            Violation::RNotPd => write!(f, "R not positive definite"),
            Violation::GammaNotPositive => write!(f, "gamma not positive"),
        }
    }
}

fn check_shape(out: &mut Vec<Violation>, name: &str, m: &Mat, rows: usize, cols: usize) {
    if m.nrows() != rows || m.ncols() != cols {
        out.push(Violation::Dimension(format!("{name} is {}x{}, expected {rows}x{cols}", m.nrows(), m.ncols())));
    }
}

/// Lists every violated invariant of the model and cost; empty means valid.
pub fn validate_model(sys: &SystemModel, cost: &CostSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = sys.a.nrows();
    let (m1, m2) = (sys.m1(), sys.m2());
    check_shape(&mut out, "A", &sys.a, n, n);
    check_shape(&mut out, "B", &sys.b, n, m1);
    check_shape(&mut out, "G", &sys.g, n, m2);
    check_shape(&mut out, "C", &sys.c, n, n);
    check_shape(&mut out, "D", &sys.d, n, m1);
    check_shape(&mut out, "Q", &cost.q, n, n);
    check_shape(&mut out, "R", &cost.r, m1, m1);
    check_shape(&mut out, "Gamma", &cost.coupling, n, n);
    if n == 0 || m1 == 0 || m2 == 0 {
        out.push(Violation::Dimension(format!("empty dimension (n={n}, m1={m1}, m2={m2})")));
    }
    let named: [(&'static str, &Mat); 8] = [
        ("A", &sys.a),
        ("B", &sys.b),
        ("G", &sys.g),
        ("C", &sys.c),
        ("D", &sys.d),
        ("Q", &cost.q),
        ("R", &cost.r),
        ("Gamma", &cost.coupling),
    ];
    for (name, m) in named {
        if !linalg::all_finite(m) {
            out.push(Violation::NonFinite(name));
        }
    }
    if cost.q.is_square() && linalg::all_finite(&cost.q) {
        if linalg::asymmetry(&cost.q) > 1e-12 * (1.0 + cost.q.norm()) {
            out.push(Violation::NotSymmetric("Q"));
        } else if !linalg::is_psd(&cost.q) {
            out.push(Violation::QNotPsd);
        }
    }
    if cost.r.is_square() && linalg::all_finite(&cost.r) {
        if linalg::asymmetry(&cost.r) > 1e-12 * (1.0 + cost.r.norm()) {
            out.push(Violation::NotSymmetric("R"));
        } else if !linalg::is_pd(&cost.r) {
            out.push(Violation::RNotPd);
        }
    }
    if !(cost.gamma > 0.0 && cost.gamma.is_finite()) {
        out.push(Violation::GammaNotPositive);
    }
    out
}

/// `Υ`, `A_s`, `Q_Γ` and `Q_s` for a given stochastic solution `P*`.
pub fn derived_cost_quantities(sys: &SystemModel, cost: &CostSpec, p_star: &Mat) -> Result<DerivedCost> {
    let n = sys.n();
    if p_star.nrows() != n || p_star.ncols() != n {
        return Err(Error::Dimension(format!("P* must be {n}x{n}")));
    }
    let p = linalg::symmetrize(p_star);
    let upsilon = linalg::symmetrize(&(&cost.r + sys.d.transpose() * &p * &sys.d));
    let upsilon_inv = linalg::spd_inverse(&upsilon).ok_or(Error::UpsilonNotInvertible)?;
    // F = Υ⁻¹ Dᵀ P* C
    let f = &upsilon_inv * sys.d.transpose() * &p * &sys.c;
    let a_s = &sys.a - &sys.b * &f;
    let q_gamma = q_gamma(&cost.q, &cost.coupling);
    let c_s = &sys.c - &sys.d * &f;
    let q_s = linalg::symmetrize(&(&cost.q - &q_gamma + c_s.transpose() * &p * &c_s + f.transpose() * &cost.r * &f));
    Ok(DerivedCost { upsilon, a_s, q_gamma, q_s })
}

/// `Q_Γ = -ΓᵀQΓ + ΓᵀQ + QΓ`, symmetrized.
pub fn q_gamma(q: &Mat, coupling: &Mat) -> Mat {
    let gt = coupling.transpose();
    linalg::symmetrize(&(-(&gt * q * coupling) + &gt * q + q * coupling))
}

/// Drift of the closed-loop mean field,
/// `A - B (K_s* + Υ⁻¹ Dᵀ P* C) + G L_s*`.
pub fn closed_loop_mean_field_matrix(sys: &SystemModel, cost: &CostSpec, p_star: &Mat, s_star: &Mat) -> Result<Mat> {
    let upsilon = linalg::symmetrize(&(&cost.r + sys.d.transpose() * p_star * &sys.d));
    let upsilon_inv = linalg::spd_inverse(&upsilon).ok_or(Error::UpsilonNotInvertible)?;
    let k_s = &upsilon_inv * sys.b.transpose() * s_star;
    let l_s = sys.g.transpose() * s_star / cost.gamma_sq();
    let feedforward = &upsilon_inv * sys.d.transpose() * p_star * &sys.c;
    Ok(&sys.a - &sys.b * (k_s + feedforward) + &sys.g * l_s)
}
