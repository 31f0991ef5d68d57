#![allow(dead_code)]

use mfsc_core::irl::{MomentLayout, MomentSeries, PointMoments};
use mfsc_core::linalg::Vector;
use mfsc_core::model::{CostSpec, SystemModel};
use mfsc_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The two-state example system with a scalar control and disturbance.
pub fn example_system() -> SystemModel {
    SystemModel::new(
        Mat::from_row_slice(2, 2, &[0.3, 0.7, -0.9, 0.5]),
        Mat::from_row_slice(2, 1, &[0.2, 0.0]),
        Mat::from_row_slice(2, 1, &[0.1, 0.0]),
        Mat::from_row_slice(2, 2, &[0.01, 0.03, 0.05, 0.02]),
        Mat::from_row_slice(2, 1, &[0.05, 0.05]),
    )
}

pub fn example_cost() -> CostSpec {
    CostSpec::new(Mat::identity(2, 2) * 10.0, Mat::from_element(1, 1, 1.25), Mat::identity(2, 2) * 0.9, 2.0)
}

pub fn scalar_system(a: f64, b: f64, g: f64, c: f64, d: f64) -> SystemModel {
    let m = |v: f64| Mat::from_element(1, 1, v);
    SystemModel::new(m(a), m(b), m(g), m(c), m(d))
}

pub fn scalar_cost(q: f64, r: f64, coupling: f64, gamma: f64) -> CostSpec {
    let m = |v: f64| Mat::from_element(1, 1, v);
    CostSpec::new(m(q), m(r), m(coupling), gamma)
}

/// Exact first and second moments of `dx = (Ax + Bu + Gv)dt + (Cx + Du)dW`
/// under `u = -Kx + e(t)`, `v = Lx + f(t)`, propagated with classical RK4 on
/// a grid of `steps + 1` points spaced `dt`.
pub fn exact_moments(
    sys: &SystemModel,
    k: &Mat,
    l: &Mat,
    e: impl Fn(f64) -> Vector,
    f: impl Fn(f64) -> Vector,
    mean0: &Vector,
    cov0: &Mat,
    dt: f64,
    steps: usize,
) -> MomentSeries {
    let drift = &sys.a - &sys.b * k + &sys.g * l;
    let diff = &sys.c - &sys.d * k;
    let rhs = |t: f64, m: &Vector, s: &Mat| -> (Vector, Mat) {
        let h = &sys.b * e(t) + &sys.g * f(t);
        let c = &sys.d * e(t);
        let dm = &drift * m + &h;
        let hm = &h * m.transpose();
        let cross = &diff * m * c.transpose();
        let ds = &drift * s
            + s * drift.transpose()
            + &hm
            + hm.transpose()
            + &diff * s * diff.transpose()
            + &cross
            + cross.transpose()
            + &c * c.transpose();
        (dm, ds)
    };
    let point = |t: f64, m: &Vector, s: &Mat| -> PointMoments {
        let (et, ft) = (e(t), f(t));
        PointMoments {
            xx: s.clone(),
            ux: -k * s + &et * m.transpose(),
            vx: l * s + &ft * m.transpose(),
            uu: k * s * k.transpose() - k * m * et.transpose() - &et * m.transpose() * k.transpose()
                + &et * et.transpose(),
            x: m.clone(),
            u: -k * m + &et,
            v: l * m + &ft,
        }
    };
    let mut m = mean0.clone();
    let mut s = cov0 + mean0 * mean0.transpose();
    let mut points = vec![point(0.0, &m, &s)];
    for i in 0..steps {
        let t = i as f64 * dt;
        let (k1m, k1s) = rhs(t, &m, &s);
        let (k2m, k2s) = rhs(t + 0.5 * dt, &(&m + &k1m * (0.5 * dt)), &(&s + &k1s * (0.5 * dt)));
        let (k3m, k3s) = rhs(t + 0.5 * dt, &(&m + &k2m * (0.5 * dt)), &(&s + &k2s * (0.5 * dt)));
        let (k4m, k4s) = rhs(t + dt, &(&m + &k3m * dt), &(&s + &k3s * dt));
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (dt / 6.0);
        s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (dt / 6.0);
        points.push(point((i + 1) as f64 * dt, &m, &s));
    }
    MomentSeries::from_moments(MomentLayout::new(sys.n(), sys.m1(), sys.m2()), dt, &points).unwrap()
}

/// A few incommensurate sinusoids per channel.
pub fn probing(channels: usize, amplitude: f64, phase: f64) -> impl Fn(f64) -> Vector {
    move |t: f64| {
        Vector::from_iterator(
            channels,
            (0..channels).map(|c| {
                let shift = phase + c as f64 * 0.37;
                amplitude * ((1.3 * t + shift).sin() + 0.7 * (3.1 * t + 2.0 * shift).sin() + 0.4 * (7.7 * t).cos())
            }),
        )
    }
}

/// Scalar game with `d = 0`, so the stochastic Riccati equation reduces to
/// `βP² - (2a + c²)P - q = 0` with `β = b²/r - g²/γ²`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarGame {
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub gamma: f64,
}

impl ScalarGame {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let g: f64 = rng.random_range(-1.0..1.0);
        let c: f64 = rng.random_range(-0.5..0.5);
        let q: f64 = rng.random_range(0.5..2.0);
        let r: f64 = rng.random_range(0.5..2.0);
        // Keep the disturbance at most half as strong as the control:
        // g²/γ² <= b²/(2r).
        let gamma = f64::max(1.0, 1.5 * g.abs() * (2.0 * r).sqrt() / b.abs());
        Self { a, b, g, c, q, r, gamma }
    }

    pub fn system(&self) -> SystemModel {
        scalar_system(self.a, self.b, self.g, self.c, 0.0)
    }

    pub fn cost(&self) -> CostSpec {
        scalar_cost(self.q, self.r, 0.0, self.gamma)
    }

    /// Positive root of the quadratic; it is the stabilizing one since the
    /// closed-loop rate `2a + c² - 2βP` equals minus the discriminant root.
    pub fn stabilizing_root(&self) -> f64 {
        let beta = self.b * self.b / self.r - self.g * self.g / (self.gamma * self.gamma);
        let lin = 2.0 * self.a + self.c * self.c;
        (lin + (lin * lin + 4.0 * beta * self.q).sqrt()) / (2.0 * beta)
    }
}

/// Smallest singular value of `[A - λI, B]` over the eigenvalues `λ` of `A`
/// with real part at least `threshold` (PBH controllability margin).
pub fn pbh_margin(a: &Mat, b: &Mat, threshold: f64) -> f64 {
    use nalgebra::{Complex, DMatrix};
    let n = a.nrows();
    let eig = a.complex_eigenvalues();
    eig.iter()
        .filter(|l| l.re >= threshold)
        .map(|l| {
            let m = DMatrix::<Complex<f64>>::from_fn(n, n + b.ncols(), |r, c| {
                if c < n {
                    Complex::new(a[(r, c)], 0.0) - if r == c { *l } else { Complex::new(0.0, 0.0) }
                } else {
                    Complex::new(b[(r, c - n)], 0.0)
                }
            });
            m.singular_values().min()
        })
        .fold(f64::INFINITY, f64::min)
}

fn has_stabilizing_witness(sys: &SystemModel, rng: &mut ChaCha8Rng) -> bool {
    let l = Mat::zeros(sys.m2(), sys.n());
    (0..2000).any(|_| {
        let k = Mat::from_fn(sys.m1(), sys.n(), |_, _| rng.random_range(-10.0..10.0));
        mfsc_core::stabilizer::verify_stabilizer(&k, &l, sys, false)
    })
}

/// Seeded random game with `n ∈ {1, 2, 3}` states and scalar control and
/// disturbance, drawn until it is mildly unstable at most (spectral
/// abscissa of `A` in `[-0.5, 0.5]`), every mode with real part above
/// `-0.5` is controllable with PBH margin `0.2`, and the multiplicative
/// noise is moderate. Stabilizability is then confirmed independently of
/// the solver under test by a random search for a mean-square stabilizing
/// gain. `Q = I` makes the pair exactly detectable, and the
/// disturbance channel is weak enough (`‖G‖ ≤ 0.3·√n`, `γ = 3`) for the
/// game to keep a stabilizing solution.
pub fn random_game(seed: u64) -> (SystemModel, CostSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + (seed % 3) as usize;
    loop {
        let mut mat =
            |rows: usize, cols: usize, scale: f64| Mat::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0));
        let raw = mat(n, n, 1.0);
        let b = mat(n, 1, 1.0);
        let g = mat(n, 1, 0.3);
        let c = mat(n, n, 0.2);
        let d = mat(n, 1, 0.1);
        let coupling = mat(n, n, 0.5);
        let abscissa = raw.complex_eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        let target: f64 = rng.random_range(-0.5..0.5);
        let a = &raw - Mat::identity(n, n) * (abscissa - target);
        if pbh_margin(&a, &b, -0.5) < 0.2 {
            continue;
        }
        let sys = SystemModel::new(a, b, g, c, d);
        if !has_stabilizing_witness(&sys, &mut rng) {
            continue;
        }
        let cost = CostSpec::new(Mat::identity(n, n), Mat::from_element(1, 1, 1.0), coupling, 3.0);
        return (sys, cost);
    }
}
