//! Initial stabilizing gains from an LMI feasibility problem.
//!
//! A gain `K` makes `dx = (A - BK) x dt + (C - DK) x dw` mean-square stable
//! iff some `X ≻ 0` satisfies
//!
//! ```text
//! ⎡ AX + XAᵀ + BY + YᵀBᵀ   CX + DY ⎤
//! ⎣ XCᵀ + YᵀDᵀ             -X      ⎦ ≺ 0,      K = -Y X⁻¹.
//! ```
//!
//! The deterministic problem is the same block with `C = D = 0`. Since the
//! block is linear in `(X, Y)`, any strictly feasible point can be scaled to
//! meet a margin `≺ -εI`; the search therefore normalizes `tr X = 1` and
//! minimizes a smoothed maximum eigenvalue of the block's Schur complement
//! by projected gradient descent, with seeded random restarts.

use alloc::vec::Vec;
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lyap::GeneralizedLyapunov;
use crate::model::SystemModel;

/// Lower eigenvalue bound on `X` during the search.
pub const CONE_MARGIN: f64 = 1e-6;
/// Number of seeded restarts before giving up.
pub const MAX_RESTARTS: u64 = 20;
/// Descent rounds per restart; each round re-centers the coordinates at the
/// previous round's `X`.
const ROUNDS: usize = 10;
const ROUND_STEPS: usize = 400;

/// How inner loops obtain their first admissible gain.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Solve the LMI.
    Lmi { seed: u64 },
    /// Use the supplied gain; fail if it is not admissible.
    User(Mat),
    /// Use `K = 0` when it is admissible, the LMI otherwise.
    ZeroCheck { seed: u64 },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Lmi { seed: 0 }
    }
}

/// The LMI for a closed loop `A_eff = A + GL`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub a_eff: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub epsilon: f64,
    pub stochastic: bool,
}

impl LmiProblem {
    /// Problem for `sys` with disturbance gain `l` frozen.
    pub fn new(sys: &SystemModel, l: &Mat, deterministic: bool, epsilon: f64) -> Self {
        let a_eff = &sys.a + &sys.g * l;
        let (c, d) = if deterministic {
            (Mat::zeros(sys.n(), sys.n()), Mat::zeros(sys.n(), sys.m1()))
        } else {
            (sys.c.clone(), sys.d.clone())
        };
        Self { a_eff, b: sys.b.clone(), c, d, epsilon, stochastic: !deterministic }
    }

    fn n(&self) -> usize {
        self.a_eff.nrows()
    }

    fn m(&self) -> usize {
        self.b.ncols()
    }

    /// The symmetric `2n × 2n` block at `(X, Y)`.
    pub fn block(&self, x: &Mat, y: &Mat) -> Mat {
        let n = self.n();
        let top = &self.a_eff * x + x * self.a_eff.transpose() + &self.b * y + y.transpose() * self.b.transpose();
        let off = &self.c * x + &self.d * y;
        let mut m = Mat::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&top);
        m.view_mut((0, n), (n, n)).copy_from(&off);
        m.view_mut((n, 0), (n, n)).copy_from(&off.transpose());
        m.view_mut((n, n), (n, n)).copy_from(&(-x));
        linalg::symmetrize(&m)
    }

    /// The same problem in coordinates `x̃ = S⁻¹x`.
    fn transformed(&self, s: &Mat, s_inv: &Mat) -> Self {
        Self {
            a_eff: s_inv * &self.a_eff * s,
            b: s_inv * &self.b,
            c: s_inv * &self.c * s,
            d: s_inv * &self.d,
            epsilon: self.epsilon,
            stochastic: self.stochastic,
        }
    }

    fn closed_loop(&self, k: &Mat) -> GeneralizedLyapunov {
        let drift = &self.a_eff - &self.b * k;
        let diffusion = self.stochastic.then(|| &self.c - &self.d * k);
        GeneralizedLyapunov::from_parts(drift, diffusion)
    }
}

/// A feasible point scaled to the requested margin.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiSolution {
    pub x: Mat,
    pub y: Mat,
    pub gain: Mat,
    /// Largest eigenvalue of the block at the scaled point (`≤ -2ε`).
    pub lambda_max: f64,
    pub restart: u64,
}

/// Smoothed maximum eigenvalue `μ log Σ exp(λᵢ/μ)` and its gradient
/// `V diag(softmax(λ/μ)) Vᵀ`.
fn smoothed_max(m: &Mat, mu: f64) -> (f64, f64, Mat) {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let weights: Vec<f64> = eig.eigenvalues.iter().map(|v| libm::exp((v - top) / mu)).collect();
    let total: f64 = weights.iter().sum();
    let value = top + mu * libm::log(total);
    let mut grad = Mat::zeros(m.nrows(), m.ncols());
    for (i, w) in weights.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        grad += (v * v.transpose()) * (w / total);
    }
    (value, top, grad)
}

/// Euclidean projection onto `{X = Xᵀ : X ⪰ δI, tr X = 1}`.
fn project(x: &Mat) -> Mat {
    let n = x.nrows();
    let eig = SymmetricEigen::new(linalg::symmetrize(x));
    let mu: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mass = |tau: f64| mu.iter().map(|m| (m - tau).max(CONE_MARGIN)).sum::<f64>();
    let hi = mu.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let (mut lo, mut hi) = (mu.iter().fold(f64::INFINITY, |a, v| a.min(*v)) - 1.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut out = Mat::zeros(n, n);
    for (i, m) in mu.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        out += (v * v.transpose()) * (m - tau).max(CONE_MARGIN);
    }
    linalg::symmetrize(&out)
}

/// Schur complement of the block with respect to `-X`:
/// `F(X, Y) = AX + XAᵀ + BY + YᵀBᵀ + (CX + DY) X⁻¹ (CX + DY)ᵀ`.
///
/// For `X ≻ 0` the block is negative definite iff `F ≺ 0`, and `F` is
/// jointly matrix-convex in `(X, Y)`. Unlike the block, whose largest
/// eigenvalue is bounded below by `-λ_min(X)`, `F` keeps a well-scaled
/// optimum when the feasible `X` are ill-conditioned. Returns `F` and
/// `X⁻¹(CX + DY)ᵀ` (`None` when `X` is not invertible).
fn schur_form(prob: &LmiProblem, x: &Mat, y: &Mat) -> Option<(Mat, Mat)> {
    let top = &prob.a_eff * x + x * prob.a_eff.transpose() + &prob.b * y + y.transpose() * prob.b.transpose();
    let off = &prob.c * x + &prob.d * y;
    let x_inv = linalg::spd_inverse(x)?;
    let h = x_inv * off.transpose();
    Some((linalg::symmetrize(&(top + &off * &h)), h))
}

/// Gradients of `tr(G F(X, Y))` for symmetric `G`, with `h = X⁻¹(CX + DY)ᵀ`.
fn gradients(prob: &LmiProblem, g: &Mat, h: &Mat) -> (Mat, Mat) {
    let gh = g * h.transpose() * 2.0;
    let gx = prob.a_eff.transpose() * g + g * &prob.a_eff + prob.c.transpose() * &gh - h * g * h.transpose();
    let gy = prob.b.transpose() * g * 2.0 + prob.d.transpose() * &gh;
    (linalg::symmetrize(&gx), gy)
}

fn objective(prob: &LmiProblem, x: &Mat, y: &Mat, mu: f64) -> Option<(f64, f64, Mat, Mat)> {
    let (f, h) = schur_form(prob, x, y)?;
    let (value, top, g) = smoothed_max(&f, mu);
    value.is_finite().then_some((value, top, g, h))
}

/// Descends from `(x, y)` until `F` is negative definite with a small
/// relative margin or the step budget is spent. Returns the final point and
/// whether it is strictly feasible; `None` when the search stalls.
fn descend(prob: &LmiProblem, mut x: Mat, mut y: Mat) -> Option<(Mat, Mat, bool)> {
    let scale = 1.0 + prob.a_eff.norm() + prob.b.norm() + prob.c.norm() + prob.d.norm();
    let target = -1e-8 * scale;
    let mut mu = 1e-2 * scale;
    let mut t = 1.0 / scale;
    let (mut f, mut top, mut g, mut h) = objective(prob, &x, &y, mu)?;
    for _ in 0..ROUND_STEPS {
        if top < target {
            return Some((x, y, true));
        }
        let (gx, gy) = gradients(prob, &g, &h);
        let mut accepted = false;
        let mut stationary = false;
        t = (2.0 * t).min(1e6 / scale);
        while t > 1e-16 {
            let xn = project(&(&x - &gx * t));
            let yn = &y - &gy * t;
            let moved = (&xn - &x).norm_squared() + (&yn - &y).norm_squared();
            if !(moved > 1e-28) {
                stationary = moved.is_finite();
                break;
            }
            if let Some((fn_, topn, gn, hn)) = objective(prob, &xn, &yn, mu) {
                if fn_ <= f - 1e-4 * moved / t {
                    (x, y, f, top, g, h) = (xn, yn, fn_, topn, gn, hn);
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if stationary && t >= 1e6 / scale {
            // The projected gradient vanishes: a stationary point of the
            // smoothed problem that is not feasible.
            return None;
        }
        if !accepted || f - top > 0.5 * top.abs() {
            // Sharpen the smoothing once it dominates the remaining gap.
            mu *= 0.5;
            if mu < 1e-12 * scale {
                return None;
            }
            t = 1.0 / scale;
            (f, top, g, h) = objective(prob, &x, &y, mu)?;
        }
    }
    Some((x, y, top < target))
}

/// `(√M, √M⁻¹)` of a positive definite `M`.
fn sqrt_pair(m: &Mat) -> Option<(Mat, Mat)> {
    let eig = SymmetricEigen::new(linalg::symmetrize(m));
    if !eig.eigenvalues.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return None;
    }
    let v = &eig.eigenvectors;
    let root = eig.eigenvalues.map(libm::sqrt);
    let sqrt = v * Mat::from_diagonal(&root) * v.transpose();
    let inv = v * Mat::from_diagonal(&root.map(|r| 1.0 / r)) * v.transpose();
    Some((sqrt, inv))
}

/// Runs descent rounds from `(x, y)`. Between rounds the problem is
/// rewritten in coordinates where the current `X` becomes `I/n`: mean-square
/// stability is invariant under the change of state coordinates, and the
/// re-centering undoes the ill-conditioning that stalls first-order descent
/// when the feasible `X` are far from isotropic. Returns a strictly
/// feasible point in the original coordinates.
fn search(prob: &LmiProblem, mut x: Mat, mut y: Mat) -> Option<(Mat, Mat)> {
    let n = prob.n();
    let (mut s, mut s_inv) = (Mat::identity(n, n), Mat::identity(n, n));
    for _ in 0..ROUNDS {
        let local = prob.transformed(&s, &s_inv);
        let (xr, yr, feasible) = descend(&local, x, y)?;
        let x_orig = &s * &xr * s.transpose();
        let y_orig = &yr * s.transpose();
        if feasible {
            return Some((x_orig, y_orig));
        }
        (s, s_inv) = sqrt_pair(&(&x_orig * n as f64))?;
        x = Mat::identity(n, n) / n as f64;
        y = &y_orig * s_inv.transpose();
    }
    None
}

/// Solves the LMI and returns the scaled feasible point with its gain.
///
/// Restarts are tried in order and the first verified point wins.
pub fn solve_lmi(prob: &LmiProblem, seed: u64) -> Result<LmiSolution> {
    if !(prob.epsilon > 0.0 && prob.epsilon.is_finite()) {
        return Err(Error::InvalidParameter("LMI margin must be positive".into()));
    }
    let (n, m) = (prob.n(), prob.m());
    let mut found_unverified = false;
    for restart in 0..MAX_RESTARTS {
        let (x0, y0) = if restart == 0 {
            (Mat::identity(n, n) / n as f64, Mat::zeros(m, n))
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart);
            let s = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let y = Mat::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            (project(&(Mat::identity(n, n) / n as f64 + linalg::symmetrize(&s) / n as f64)), y)
        };
        let Some((x, y)) = search(prob, x0, y0) else { continue };
        let Some(x_inv) = linalg::spd_inverse(&x) else { continue };
        let gain = -(&y * x_inv);
        let top = linalg::sym_eigenvalues(&prob.block(&x, &y)).last().copied().unwrap_or(0.0);
        if !(top < 0.0) || !verify_closed_loop(&prob.closed_loop(&gain)) {
            found_unverified = true;
            continue;
        }
        let s = 2.0 * prob.epsilon / top.abs();
        let (x, y) = (x * s, y * s);
        let lambda_max = linalg::sym_eigenvalues(&prob.block(&x, &y)).last().copied().unwrap_or(0.0);
        return Ok(LmiSolution { x, y, gain, lambda_max, restart });
    }
    Err(if found_unverified { Error::LmiNotStabilizing } else { Error::NoStabilizer })
}

/// A gain `K` with `[A + GL - BK | C - DK]` mean-square stable (Hurwitz in
/// the deterministic problem).
pub fn find_stabilizing_gain(prob: &LmiProblem, seed: u64) -> Result<Mat> {
    solve_lmi(prob, seed).map(|s| s.gain)
}

fn verify_closed_loop(op: &GeneralizedLyapunov) -> bool {
    op.is_ms_stable().unwrap_or(false)
}

/// Whether `k0` stabilizes `sys` with the disturbance gain `l` frozen.
pub fn verify_stabilizer(k0: &Mat, l: &Mat, sys: &SystemModel, deterministic: bool) -> bool {
    GeneralizedLyapunov::new(sys, k0, l, deterministic).and_then(|op| op.is_ms_stable()).unwrap_or(false)
}

/// Initial gain for an inner loop under `strategy`.
pub fn initial_gain(
    sys: &SystemModel,
    l: &Mat,
    deterministic: bool,
    strategy: &InitStrategy,
    epsilon: f64,
) -> Result<Mat> {
    match strategy {
        InitStrategy::User(k0) => {
            if k0.nrows() != sys.m1() || k0.ncols() != sys.n() {
                return Err(Error::Dimension(alloc::format!("K0 must be {}x{}", sys.m1(), sys.n())));
            }
            if verify_stabilizer(k0, l, sys, deterministic) {
                Ok(k0.clone())
            } else {
                Err(Error::InitialGainNotAdmissible)
            }
        }
        InitStrategy::ZeroCheck { seed } => {
            let zero = Mat::zeros(sys.m1(), sys.n());
            if verify_stabilizer(&zero, l, sys, deterministic) {
                Ok(zero)
            } else {
                find_stabilizing_gain(&LmiProblem::new(sys, l, deterministic, epsilon), *seed)
            }
        }
        InitStrategy::Lmi { seed } => find_stabilizing_gain(&LmiProblem::new(sys, l, deterministic, epsilon), *seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> SystemModel {
        let m = |v: f64| Mat::from_element(1, 1, v);
        SystemModel::new(m(a), m(b), m(0.0), m(c), m(d))
    }

    #[test]
    fn projection_lands_on_the_cone() {
        let x = Mat::from_row_slice(2, 2, &[3.0, 1.0, 1.0, -2.0]);
        let p = project(&x);
        assert!((p.trace() - 1.0).abs() < 1e-12);
        assert!(linalg::min_eigenvalue(&p) >= CONE_MARGIN - 1e-12);
    }

    #[test]
    fn unstable_scalar_gets_a_stabilizer() {
        let sys = scalar(1.0, 1.0, 0.0, 0.0);
        let prob = LmiProblem::new(&sys, &Mat::zeros(1, 1), false, 0.1);
        let sol = solve_lmi(&prob, 3).unwrap();
        assert!(2.0 * (1.0 - sol.gain[(0, 0)]) < 0.0);
        assert!(sol.lambda_max <= -0.1);
        assert!(verify_stabilizer(&sol.gain, &Mat::zeros(1, 1), &sys, false));
    }

    #[test]
    fn zero_check_takes_the_fast_path() {
        let sys = scalar(-1.0, 1.0, 0.1, 0.0);
        let k = initial_gain(&sys, &Mat::zeros(1, 1), false, &InitStrategy::ZeroCheck { seed: 0 }, 1.0).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn user_gain_is_checked() {
        let sys = scalar(1.0, 1.0, 0.0, 0.0);
        let l = Mat::zeros(1, 1);
        let bad = InitStrategy::User(Mat::from_element(1, 1, 0.5));
        assert_eq!(initial_gain(&sys, &l, false, &bad, 1.0), Err(Error::InitialGainNotAdmissible));
        let good = InitStrategy::User(Mat::from_element(1, 1, 2.0));
        assert!(initial_gain(&sys, &l, false, &good, 1.0).is_ok());
    }

    #[test]
    fn verification_follows_the_operator_spectrum() {
        let stable = scalar(-1.0, 1.0, 0.0, 0.0);
        assert!(verify_stabilizer(&Mat::zeros(1, 1), &Mat::zeros(1, 1), &stable, false));
        // 2(a - bk) + c² = 2(0.1) + 0 > 0.
        let unstable = scalar(0.6, 1.0, 0.0, 0.0);
        assert!(!verify_stabilizer(&Mat::from_element(1, 1, 0.5), &Mat::zeros(1, 1), &unstable, false));
    }

    #[test]
    fn uncontrollable_unstable_mode_has_no_stabilizer() {
        let sys = scalar(1.0, 0.0, 0.0, 0.0);
        let prob = LmiProblem::new(&sys, &Mat::zeros(1, 1), true, 1.0);
        assert_eq!(find_stabilizing_gain(&prob, 0), Err(Error::NoStabilizer));
    }
}
