//! Inexact dual-loop iterations.
//!
//! The disturbance gain produced by each outer step, or the control gain
//! produced by each inner step, is perturbed by a matrix of prescribed
//! Frobenius norm. The harness records how far the perturbed iterates drift
//! from the exact limit. Because the exact value is stationary in both
//! gains at the saddle point, the steady error should scale with the
//! square of the perturbation size.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dualloop::{
    self, DualLoopConfig, GameInstance, IterationDisturbance, IterationTrace, LoopSchedule, ModelBasedStep,
    NoDisturbance, Stop,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lyap::GeneralizedLyapunov;
use crate::model::{CostSpec, SystemModel};
use crate::stabilizer::InitStrategy;

/// Iterations per disturbed run.
pub const RUN_LENGTH: usize = 30;
/// Number of final iterates averaged into the steady error.
pub const STEADY_WINDOW: usize = 5;
/// Errors above this count as divergence.
pub const BREAKDOWN_ERROR: f64 = 1e3;
/// Gain-change threshold of the reference (exact) solves.
pub const REFERENCE_XI: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceMode {
    PerOuter,
    PerInner,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// Normalized all-ones matrix.
    AllOnes,
    /// A fixed matrix, normalized.
    Given(Mat),
    /// A fresh seeded random direction at every perturbation.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSchedule {
    /// Frobenius norm of every perturbation.
    pub magnitude: f64,
    pub mode: DisturbanceMode,
    pub direction: Direction,
}

impl DisturbanceSchedule {
    pub fn fixed(magnitude: f64, mode: DisturbanceMode) -> Self {
        Self { magnitude, mode, direction: Direction::AllOnes }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    fn perturbation(&self, rows: usize, cols: usize, stream: u64) -> Mat {
        let raw = match &self.direction {
            Direction::AllOnes => Mat::from_element(rows, cols, 1.0),
            Direction::Given(m) => m.clone(),
            Direction::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(stream);
                Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
            }
        };
        let norm = raw.norm();
        if norm == 0.0 {
            raw
        } else {
            raw * (self.magnitude / norm)
        }
    }
}

impl IterationDisturbance for DisturbanceSchedule {
    fn perturb_disturbance_gain(&mut self, k: usize, l: &mut Mat) {
        if self.magnitude == 0.0 || self.mode == DisturbanceMode::PerInner {
            return;
        }
        *l += self.perturbation(l.nrows(), l.ncols(), (k as u64) << 32);
    }

    fn perturb_control_gain(&mut self, k: usize, j: usize, gain: &mut Mat) {
        if self.magnitude == 0.0 || self.mode == DisturbanceMode::PerOuter {
            return;
        }
        *gain += self.perturbation(gain.nrows(), gain.ncols(), ((k as u64) << 32) | (j as u64 + 1) << 1 | 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    /// Iteration at which the run broke down (1-based).
    pub iteration: usize,
    pub reason: String,
}

/// Error history of one disturbed run.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeRun {
    pub magnitude: f64,
    /// Frobenius error of every iterate against the exact limit.
    pub errors: Vec<f64>,
    pub breakdown: Option<Breakdown>,
}

impl MagnitudeRun {
    /// Mean of the final [`STEADY_WINDOW`] errors (infinite on breakdown).
    pub fn steady_error(&self) -> f64 {
        if self.breakdown.is_some() || self.errors.is_empty() {
            return f64::INFINITY;
        }
        let tail = &self.errors[self.errors.len().saturating_sub(STEADY_WINDOW)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Largest error after the fifth iterate.
    pub fn max_after_transient(&self) -> f64 {
        self.errors.iter().skip(5).fold(0.0, |a: f64, e| a.max(*e))
    }

    /// Bounded: no breakdown and the errors after the fifth iterate stay
    /// within ten times the steady value.
    pub fn is_bounded(&self) -> bool {
        let steady = self.steady_error();
        steady.is_finite() && self.max_after_transient() <= 10.0 * steady.max(1e-14)
    }
}

/// Runs over a magnitude grid plus fitted summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub runs: Vec<MagnitudeRun>,
}

impl RobustnessReport {
    fn fit_points(&self) -> Vec<(f64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.magnitude > 0.0 && r.breakdown.is_none())
            .map(|r| (r.magnitude, r.steady_error()))
            .filter(|(_, s)| *s > 0.0 && s.is_finite())
            .collect()
    }

    /// Least-squares `ĉ` in `steady ≈ ĉ · magnitude²`.
    pub fn quadratic_coefficient(&self) -> Option<f64> {
        let pts = self.fit_points();
        let num: f64 = pts.iter().map(|(d, s)| s * d * d).sum();
        let den: f64 = pts.iter().map(|(d, _)| d * d * d * d).sum();
        (den > 0.0).then(|| num / den)
    }

    /// Slope of `log steady` against `log magnitude` (needs two points).
    pub fn log_log_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.fit_points().iter().map(|(d, s)| (libm::log(*d), libm::log(*s))).collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }

    /// Spearman rank correlation between magnitude and steady error over
    /// the runs that did not break down.
    pub fn rank_correlation(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> =
            self.runs.iter().filter(|r| r.breakdown.is_none()).map(|r| (r.magnitude, r.steady_error())).collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        spearman(&xs, &ys)
    }

    /// Whether steady errors are nondecreasing in magnitude below the first
    /// breakdown, allowing `inversions` exceptions.
    pub fn is_monotone(&self, inversions: usize) -> bool {
        let steady: Vec<f64> = self.stable_prefix().iter().map(|r| r.steady_error()).collect();
        steady.windows(2).filter(|w| w[1] < w[0]).count() <= inversions
    }

    /// Runs up to (excluding) the first breakdown, in grid order.
    pub fn stable_prefix(&self) -> &[MagnitudeRun] {
        let end = self.runs.iter().position(|r| r.breakdown.is_some()).unwrap_or(self.runs.len());
        &self.runs[..end]
    }

    /// Smallest magnitude that broke down.
    pub fn breakdown_magnitude(&self) -> Option<f64> {
        self.runs.iter().find(|r| r.breakdown.is_some()).map(|r| r.magnitude)
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / libm::sqrt(vx * vy))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).unwrap_or(core::cmp::Ordering::Equal));
    let mut out = alloc::vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for t in &idx[i..=j] {
            out[*t] = rank;
        }
        i = j + 1;
    }
    out
}

/// Exact reference solve with a tight tolerance.
pub fn reference_solution(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> Result<(dualloop::RiccatiSolution, IterationTrace)> {
    let tight = DualLoopConfig { xi: cfg.xi.min(REFERENCE_XI), ..cfg.clone() };
    Ok(dualloop::outer_loop_sare(sys, cost, &tight, init)?)
}

fn harness_schedule(cfg: &DualLoopConfig, outer: Stop) -> LoopSchedule {
    LoopSchedule { outer, inner: Stop::Tolerance { xi: cfg.xi.min(REFERENCE_XI), max: cfg.max_inner } }
}

fn outer_run(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    sched: &DisturbanceSchedule,
    p_star: &Mat,
    iterations: usize,
) -> MagnitudeRun {
    let game = GameInstance::stochastic(sys, cost);
    let mut step = ModelBasedStep::new(game, init.clone(), cfg.epsilon_lmi);
    let l0 = Mat::zeros(sys.m2(), sys.n());
    let mut hook = DisturbanceSchedule { mode: DisturbanceMode::PerOuter, ..sched.clone() };
    let schedule = harness_schedule(cfg, Stop::Fixed(iterations));
    let (trace, failure) = match dualloop::run_dual_loop(&mut step, &l0, schedule, cfg.warm_start, &mut hook) {
        Ok((_, trace)) => (trace, None),
        Err(f) => (f.trace, Some(f.error)),
    };
    // Only fully recorded outer steps count.
    let complete = trace.outer.iter().filter(|r| r.gain_change.is_finite());
    let errors: Vec<f64> = complete.map(|r| (p_star - &r.value).norm()).collect();
    let breakdown = classify(&errors, failure);
    MagnitudeRun { magnitude: sched.magnitude, errors, breakdown }
}

fn classify(errors: &[f64], failure: Option<Error>) -> Option<Breakdown> {
    if let Some(e) = failure {
        return Some(Breakdown { iteration: errors.len() + 1, reason: format!("{e}") });
    }
    errors
        .iter()
        .position(|e| !(e.is_finite() && *e <= BREAKDOWN_ERROR))
        .map(|i| Breakdown { iteration: i + 1, reason: format!("error {:.3e} exceeds {BREAKDOWN_ERROR:e}", errors[i]) })
}

/// Outer loop with `L^k` perturbed after every update, measured against the
/// exact `P*`.
pub fn run_inexact_outer(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    sched: &DisturbanceSchedule,
) -> Result<MagnitudeRun> {
    let (reference, _) = reference_solution(sys, cost, cfg, init)?;
    Ok(outer_run(sys, cost, cfg, init, sched, &reference.p, RUN_LENGTH))
}

/// Frozen context of one inner loop taken from an exact run.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerContext {
    /// 1-based outer index.
    pub outer: usize,
    pub disturbance_gain: Mat,
    pub initial_gain: Mat,
    /// Exact inner limit `P^k`.
    pub limit: Mat,
    pub limit_gain: Mat,
}

/// Context of outer step `k_fixed` of the exact run.
pub fn inner_context(trace: &IterationTrace, l0: &Mat, k_fixed: usize) -> Result<InnerContext> {
    if k_fixed == 0 || k_fixed > trace.outer.len() {
        return Err(Error::InvalidParameter(format!("outer index {k_fixed} outside 1..={}", trace.outer.len())));
    }
    let rec = &trace.outer[k_fixed - 1];
    let l = if k_fixed == 1 { l0.clone() } else { trace.outer[k_fixed - 2].disturbance_gain.clone() };
    Ok(InnerContext {
        outer: k_fixed,
        disturbance_gain: l,
        initial_gain: rec.initial_gain.clone(),
        limit: rec.value.clone(),
        limit_gain: rec.control_gain.clone(),
    })
}

fn inner_run(game: &GameInstance, ctx: &InnerContext, sched: &DisturbanceSchedule, iterations: usize) -> MagnitudeRun {
    let mut step = ModelBasedStep::new(game.clone(), InitStrategy::User(ctx.initial_gain.clone()), 1.0);
    let mut hook = DisturbanceSchedule { mode: DisturbanceMode::PerInner, ..sched.clone() };
    let result = dualloop::inner_loop(
        &mut step,
        &ctx.disturbance_gain,
        &ctx.initial_gain,
        Stop::Fixed(iterations),
        &mut hook,
        ctx.outer,
    );
    let (records, failure) = match result {
        Ok(o) => (o.records, None),
        Err((e, records)) => (records, Some(e)),
    };
    let errors: Vec<f64> = records.iter().map(|r| (&r.value - &ctx.limit).norm()).collect();
    let breakdown = classify(&errors, failure);
    MagnitudeRun { magnitude: sched.magnitude, errors, breakdown }
}

/// Inner loop of outer step `k_fixed` with every `K^{(k,j)}` perturbed,
/// measured against that loop's exact limit.
pub fn run_inexact_inner(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    sched: &DisturbanceSchedule,
    k_fixed: usize,
) -> Result<MagnitudeRun> {
    let (_, trace) = reference_solution(sys, cost, cfg, init)?;
    let ctx = inner_context(&trace, &Mat::zeros(sys.m2(), sys.n()), k_fixed)?;
    Ok(inner_run(&GameInstance::stochastic(sys, cost), &ctx, sched, RUN_LENGTH))
}

/// Direction `δK` of unit Frobenius norm that maximizes the second-order
/// growth `tr(Y δKᵀ R_p δK)` of the value, where `ℒ*(Y) + I = 0` is taken
/// at the inner limit and `R_p = R + DᵀP^kD`.
pub fn worst_inner_direction(game: &GameInstance, ctx: &InnerContext) -> Result<Mat> {
    let op = game.operator(&ctx.limit_gain, &ctx.disturbance_gain)?;
    let adjoint = GeneralizedLyapunov::from_parts(op.drift().transpose(), op.diffusion().map(|h| h.transpose()));
    let y = adjoint.solve(&Mat::identity(game.n(), game.n()))?;
    let r_p = game.input_weight(&ctx.limit);
    let top = |m: &Mat| -> linalg::Vector {
        let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(m));
        let i = eig.eigenvalues.imax();
        eig.eigenvectors.column(i).into_owned()
    };
    Ok(top(&r_p) * top(&y).transpose())
}

/// Summary of a sweep over perturbation magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct IssSummary {
    pub outer: RobustnessReport,
    pub inner: RobustnessReport,
    /// Outer index whose inner loop was perturbed.
    pub inner_outer_index: usize,
}

/// Slope window accepted for fixed-direction sweeps.
pub const SLOPE_RANGE: (f64, f64) = (1.5, 2.5);

impl IssSummary {
    /// CSV with columns
    /// `magnitude,steady_error_outer,steady_error_inner,breakdown_outer,breakdown_inner`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("magnitude,steady_error_outer,steady_error_inner,breakdown_outer,breakdown_inner\n");
        for (o, i) in self.outer.runs.iter().zip(&self.inner.runs) {
            let _ = writeln!(
                out,
                "{:e},{:.6e},{:.6e},{},{}",
                o.magnitude,
                o.steady_error(),
                i.steady_error(),
                u8::from(o.breakdown.is_some()),
                u8::from(i.breakdown.is_some())
            );
        }
        out
    }

    /// Violated sweep invariants; empty when all hold.
    ///
    /// Checked below the first breakdown of each loop: boundedness of every
    /// run, nondecreasing steady errors, and a log–log slope within
    /// [`SLOPE_RANGE`] whenever at least two positive magnitudes remain.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, report) in [("outer", &self.outer), ("inner", &self.inner)] {
            for run in report.stable_prefix() {
                if run.magnitude > 0.0 && !run.is_bounded() {
                    out.push(format!("{name}: run at magnitude {:e} is not bounded", run.magnitude));
                }
            }
            if !report.is_monotone(0) {
                out.push(format!("{name}: steady errors decrease with magnitude"));
            }
            let prefix = RobustnessReport { runs: report.stable_prefix().to_vec() };
            if let Some(slope) = prefix.log_log_slope() {
                if !(SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope) {
                    out.push(format!("{name}: log-log slope {slope:.3} outside [1.5, 2.5]"));
                }
            }
        }
        out
    }
}

/// Outer step whose inner loop the harness perturbs by default: the first
/// warm-started one, so the transient is not dominated by the initial
/// stabilizer.
pub fn default_inner_index(trace: &IterationTrace) -> usize {
    trace.outer.len().clamp(1, 2)
}

/// Fixed-direction sweep over `grid` (sorted ascending) for both loops.
///
/// The perturbed inner loop is the one at [`default_inner_index`].
pub fn iss_sweep(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    grid: &[f64],
    direction: Direction,
) -> Result<IssSummary> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::InvalidParameter("magnitude grid must be finite, nonnegative and ascending".into()));
    }
    let (reference, trace) = reference_solution(sys, cost, cfg, init)?;
    let game = GameInstance::stochastic(sys, cost);
    let k_fixed = default_inner_index(&trace);
    let ctx = inner_context(&trace, &Mat::zeros(sys.m2(), sys.n()), k_fixed)?;
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    for &magnitude in grid {
        let sched = DisturbanceSchedule { magnitude, mode: DisturbanceMode::Both, direction: direction.clone() };
        outer.push(outer_run(sys, cost, cfg, init, &sched, &reference.p, RUN_LENGTH));
        inner.push(inner_run(&game, &ctx, &sched, RUN_LENGTH));
    }
    Ok(IssSummary {
        outer: RobustnessReport { runs: outer },
        inner: RobustnessReport { runs: inner },
        inner_outer_index: k_fixed,
    })
}

/// Bound `e_j ≤ ℓ α^j + κ` fitted to an error sequence with `κ` given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricFit {
    pub ell: f64,
    pub alpha: f64,
    pub kappa: f64,
    /// `max_j (e_j - ℓα^j - κ)`; nonpositive when the bound holds.
    pub residual: f64,
}

/// Fits `α` by least squares on `log(e_j - κ)` over the iterates that are
/// still well above `κ`, then takes the smallest `ℓ` that makes the bound
/// hold on those iterates.
pub fn fit_geometric_offset(errors: &[f64], kappa: f64) -> Option<GeometricFit> {
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e - kappa > kappa.max(1e-300))
        .map(|(j, e)| ((j + 1) as f64, libm::log(e - kappa)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let alpha = libm::exp(sxy / sxx).min(1.0 - 1e-12);
    let ell = pts.iter().map(|(j, le)| libm::exp(*le) / libm::pow(alpha, *j)).fold(0.0, f64::max);
    let residual = errors
        .iter()
        .enumerate()
        .map(|(j, e)| e - ell * libm::pow(alpha, (j + 1) as f64) - kappa)
        .fold(f64::NEG_INFINITY, f64::max);
    Some(GeometricFit { ell, alpha, kappa, residual })
}

/// Reruns the exact dual loop through the disturbance hook at zero
/// magnitude; the trace must equal the undisturbed one.
pub fn zero_disturbance_traces(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> Result<(IterationTrace, IterationTrace)> {
    let game = GameInstance::stochastic(sys, cost);
    let l0 = Mat::zeros(sys.m2(), sys.n());
    let schedule = cfg.schedule();
    let mut exact = ModelBasedStep::new(game.clone(), init.clone(), cfg.epsilon_lmi);
    let (_, a) = dualloop::run_dual_loop(&mut exact, &l0, schedule, cfg.warm_start, &mut NoDisturbance)?;
    let mut hooked = ModelBasedStep::new(game, init.clone(), cfg.epsilon_lmi);
    let mut zero = DisturbanceSchedule::fixed(0.0, DisturbanceMode::Both);
    let (_, b) = dualloop::run_dual_loop(&mut hooked, &l0, schedule, cfg.warm_start, &mut zero)?;
    Ok((a, b))
}
