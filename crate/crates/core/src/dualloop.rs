//! Dual-loop iteration for indefinite (stochastic) algebraic Riccati
//! equations arising from zero-sum linear-quadratic games.
//!
//! The game instance is `[A, B, G | C, D]` with weights `(Q, R, γ)`. For a
//! fixed disturbance gain `L` the inner loop runs policy iteration on the
//! control gain,
//!
//! ```text
//! ℒ_{K,L}(P) + Q - γ² LᵀL + KᵀRK = 0,    K ← (R + DᵀPD)⁻¹ (BᵀP + DᵀPC),
//! ```
//!
//! and the outer loop refreshes `L ← γ⁻² GᵀP` from the inner fixed point.
//! Both loops stop on the spectral norm of the gain change.
//!
//! The loop logic is written against [`PolicyStep`] so the same driver runs
//! the model-based iteration, the least-squares (data-driven) iteration and
//! the disturbed iterations of the robustness harness.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lyap::GeneralizedLyapunov;
use crate::model::{self, CostSpec, DerivedCost, GainPair, SystemModel};
use crate::stabilizer::{self, InitStrategy};

/// Tolerance of the psd orderings checked on traces.
pub const ORDERING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DualLoopConfig {
    /// Threshold on the spectral norm of gain changes.
    pub xi: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Margin of the stabilizing LMI.
    pub epsilon_lmi: f64,
    /// Reuse the previous outer step's gain as the next inner start when it
    /// is still admissible.
    pub warm_start: bool,
}

impl Default for DualLoopConfig {
    fn default() -> Self {
        Self { xi: 1e-5, max_outer: 100, max_inner: 100, epsilon_lmi: 5.0, warm_start: true }
    }
}

impl DualLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::InvalidParameter(format!("xi must be positive, got {}", self.xi)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter("iteration caps must be at least 1".into()));
        }
        if !(self.epsilon_lmi > 0.0 && self.epsilon_lmi.is_finite()) {
            return Err(Error::InvalidParameter("LMI margin must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LoopSchedule {
        LoopSchedule {
            outer: Stop::Tolerance { xi: self.xi, max: self.max_outer },
            inner: Stop::Tolerance { xi: self.xi, max: self.max_inner },
        }
    }
}

/// Which Riccati equation a solution belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Control,
    Disturbance,
}

/// A zero-sum LQ game `[A, B, G | C, D]`, `(Q, R, γ)`.
///
/// With `deterministic` the diffusion is ignored; `Q` may be indefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    pub sys: SystemModel,
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
    pub deterministic: bool,
}

impl GameInstance {
    /// The stochastic game behind the SARE.
    pub fn stochastic(sys: &SystemModel, cost: &CostSpec) -> Self {
        Self { sys: sys.clone(), q: cost.q.clone(), r: cost.r.clone(), gamma: cost.gamma, deterministic: false }
    }

    /// The deterministic mean-field game behind the ARE:
    /// `[A_s, B, G | 0, 0]` with weights `(Q_s, Υ)`.
    pub fn deterministic_are(sys: &SystemModel, cost: &CostSpec, derived: &DerivedCost) -> Self {
        let mut reduced = sys.without_noise();
        reduced.a = derived.a_s.clone();
        Self {
            sys: reduced,
            q: derived.q_s.clone(),
            r: derived.upsilon.clone(),
            gamma: cost.gamma,
            deterministic: true,
        }
    }

    /// The shifted game in `Π = S - P*`: drift `A - B K_p* + G L_p*`,
    /// weights `(-Q_Γ, Υ)`. Its gains are `K_π = K_s - Υ⁻¹BᵀP*` and
    /// `L_π = L_s - L_p*`, so its outer loop starts from `L_π = -L_p*`.
    pub fn pi_transformed(
        sys: &SystemModel,
        cost: &CostSpec,
        derived: &DerivedCost,
        stochastic_gains: &GainPair,
    ) -> Self {
        let mut shifted = sys.without_noise();
        shifted.a = &sys.a - &sys.b * &stochastic_gains.control + &sys.g * &stochastic_gains.disturbance;
        Self {
            sys: shifted,
            q: -derived.q_gamma.clone(),
            r: derived.upsilon.clone(),
            gamma: cost.gamma,
            deterministic: true,
        }
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn gamma_sq(&self) -> f64 {
        self.gamma * self.gamma
    }

    /// `R + DᵀPD` (just `R` for deterministic games).
    pub fn input_weight(&self, p: &Mat) -> Mat {
        if self.deterministic {
            self.r.clone()
        } else {
            linalg::symmetrize(&(&self.r + self.sys.d.transpose() * p * &self.sys.d))
        }
    }

    /// `(R + DᵀPD)⁻¹ (BᵀP + DᵀPC)`.
    pub fn control_gain(&self, p: &Mat) -> Result<Mat> {
        let weight = self.input_weight(p);
        let inv = linalg::spd_inverse(&weight).ok_or(Error::InputWeightSingular)?;
        let mut lin = self.sys.b.transpose() * p;
        if !self.deterministic {
            lin += self.sys.d.transpose() * p * &self.sys.c;
        }
        Ok(inv * lin)
    }

    /// `γ⁻² GᵀP`.
    pub fn disturbance_gain(&self, p: &Mat) -> Mat {
        self.sys.g.transpose() * p / self.gamma_sq()
    }

    pub fn gain(&self, p: &Mat, which: Which) -> Result<Mat> {
        match which {
            Which::Control => self.control_gain(p),
            Which::Disturbance => Ok(self.disturbance_gain(p)),
        }
    }

    pub fn operator(&self, k: &Mat, l: &Mat) -> Result<GeneralizedLyapunov> {
        GeneralizedLyapunov::new(&self.sys, k, l, self.deterministic)
    }

    /// `Q - γ² LᵀL + KᵀRK`.
    pub fn policy_weight(&self, k: &Mat, l: &Mat) -> Mat {
        linalg::symmetrize(&(&self.q - l.transpose() * l * self.gamma_sq() + k.transpose() * &self.r * k))
    }

    /// Value of the policy pair `(K, L)`: the solution of
    /// `ℒ_{K,L}(P) + Q - γ²LᵀL + KᵀRK = 0`.
    pub fn evaluate(&self, k: &Mat, l: &Mat) -> Result<Mat> {
        self.operator(k, l)?.solve(&self.policy_weight(k, l))
    }

    pub fn is_admissible(&self, k: &Mat, l: &Mat) -> Result<bool> {
        self.operator(k, l)?.is_ms_stable()
    }

    /// Frobenius norm of the `H₂`-type Riccati equation obtained by freezing
    /// the disturbance gain at `l`.
    pub fn frozen_residual(&self, p: &Mat, l: &Mat) -> Result<f64> {
        let k = self.control_gain(p)?;
        let lhs = self.operator(&k, l)?.apply(p) + self.policy_weight(&k, l);
        Ok(lhs.norm())
    }

    /// Frobenius norm of the left side of the game Riccati equation
    /// `AᵀP + PA + CᵀPC + Q + γ⁻²PGGᵀP - (PB + CᵀPD)(R + DᵀPD)⁻¹(BᵀP + DᵀPC)`.
    pub fn residual(&self, p: &Mat) -> Result<f64> {
        let s = &self.sys;
        let weight = self.input_weight(p);
        let inv = linalg::spd_inverse(&weight).ok_or(Error::InputWeightSingular)?;
        let mut cross = p * &s.b;
        let mut lhs = s.a.transpose() * p + p * &s.a + &self.q + p * &s.g * s.g.transpose() * p / self.gamma_sq();
        if !self.deterministic {
            cross += s.c.transpose() * p * &s.d;
            lhs += s.c.transpose() * p * &s.c;
        }
        lhs -= &cross * inv * cross.transpose();
        Ok(linalg::symmetrize(&lhs).norm())
    }
}

/// `𝒦¹(P)` or `𝒦²(P)` of a game instance.
pub fn gain_from_value(p: &Mat, game: &GameInstance, which: Which) -> Result<Mat> {
    game.gain(p, which)
}

/// Residual of the SARE at `p`.
pub fn sare_residual(p: &Mat, sys: &SystemModel, cost: &CostSpec) -> Result<f64> {
    GameInstance::stochastic(sys, cost).residual(p)
}

/// Residual of the mean-field ARE at `s`, given the SARE solution `p_star`.
pub fn are_residual(s: &Mat, sys: &SystemModel, cost: &CostSpec, p_star: &Mat) -> Result<f64> {
    let derived = model::derived_cost_quantities(sys, cost, p_star)?;
    GameInstance::deterministic_are(sys, cost, &derived).residual(s)
}

/// Residual of either Riccati equation; `p_star` is required for the ARE.
pub fn riccati_residual(value: &Mat, sys: &SystemModel, cost: &CostSpec, which: RiccatiKind<'_>) -> Result<f64> {
    match which {
        RiccatiKind::Stochastic => sare_residual(value, sys, cost),
        RiccatiKind::MeanField { p_star } => are_residual(value, sys, cost, p_star),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RiccatiKind<'a> {
    Stochastic,
    MeanField { p_star: &'a Mat },
}

/// Output of one policy evaluation + improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// `P^{(k,j)}`.
    pub value: Mat,
    /// Improved control gain `K^{(k,j)}`.
    pub control_gain: Mat,
    /// Disturbance gain implied by `value`; becomes `L^k` at the end of an
    /// inner loop.
    pub disturbance_gain: Mat,
    /// Extra estimate produced by the step (the `DᵀPD` block of the
    /// data-driven regression), if any.
    pub aux: Option<Mat>,
    /// Step-specific residual: the frozen Riccati residual for model-based
    /// steps, the regression residual for data-driven ones.
    pub residual: f64,
}

/// One policy-iteration step plus the admissibility machinery the driver
/// needs.
pub trait PolicyStep {
    /// `(n, m1, m2)`.
    fn dims(&self) -> (usize, usize, usize);

    /// A gain `K` with `[A - BK + GL | C - DK]` mean-square stable.
    fn initial_gain(&mut self, l: &Mat) -> Result<Mat>;

    fn is_admissible(&self, k: &Mat, l: &Mat) -> Result<bool>;

    /// Evaluates `(K, L)` and returns the improved gains.
    fn step(&mut self, k: &Mat, l: &Mat) -> Result<StepResult>;

    /// Residual of the full Riccati equation at `value`, when a model is
    /// available.
    fn game_residual(&self, _value: &Mat) -> Option<f64> {
        None
    }
}

/// Model-based policy step on a [`GameInstance`].
#[derive(Debug, Clone)]
pub struct ModelBasedStep {
    pub game: GameInstance,
    pub init: InitStrategy,
    pub epsilon_lmi: f64,
    /// Whether every policy is re-checked for admissibility before it is
    /// evaluated.
    pub check_iterates: bool,
}

impl ModelBasedStep {
    pub fn new(game: GameInstance, init: InitStrategy, epsilon_lmi: f64) -> Self {
        Self { game, init, epsilon_lmi, check_iterates: true }
    }
}

impl PolicyStep for ModelBasedStep {
    fn dims(&self) -> (usize, usize, usize) {
        (self.game.n(), self.game.sys.m1(), self.game.sys.m2())
    }

    fn initial_gain(&mut self, l: &Mat) -> Result<Mat> {
        stabilizer::initial_gain(&self.game.sys, l, self.game.deterministic, &self.init, self.epsilon_lmi)
    }

    fn is_admissible(&self, k: &Mat, l: &Mat) -> Result<bool> {
        self.game.is_admissible(k, l)
    }

    fn step(&mut self, k: &Mat, l: &Mat) -> Result<StepResult> {
        let value = self.game.evaluate(k, l)?;
        if !linalg::all_finite(&value) {
            return Err(Error::NonFinite("policy evaluation".into()));
        }
        let control_gain = self.game.control_gain(&value)?;
        let disturbance_gain = self.game.disturbance_gain(&value);
        let residual = self.game.frozen_residual(&value, l)?;
        let aux = (!self.game.deterministic).then(|| self.game.sys.d.transpose() * &value * &self.game.sys.d);
        Ok(StepResult { value, control_gain, disturbance_gain, aux, residual })
    }

    fn game_residual(&self, value: &Mat) -> Option<f64> {
        self.game.residual(value).ok()
    }
}

/// Stopping rule of one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Stop once the gain change is below `xi`; fail after `max` steps.
    Tolerance { xi: f64, max: usize },
    /// Run exactly this many steps.
    Fixed(usize),
}

impl Stop {
    fn cap(&self) -> usize {
        match *self {
            Stop::Tolerance { max, .. } => max,
            Stop::Fixed(n) => n,
        }
    }

    fn done(&self, step: usize, change: f64) -> bool {
        match *self {
            Stop::Tolerance { xi, .. } => change < xi,
            Stop::Fixed(n) => step >= n,
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, Stop::Fixed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSchedule {
    pub outer: Stop,
    pub inner: Stop,
}

/// Hook that perturbs gains as they are produced, modelling inexact
/// updates. Implementations must leave gains untouched at zero magnitude.
pub trait IterationDisturbance {
    /// Called after the disturbance-gain update of outer step `k`.
    fn perturb_disturbance_gain(&mut self, _k: usize, _l: &mut Mat) {}
    /// Called after the control-gain update of inner step `(k, j)`.
    fn perturb_control_gain(&mut self, _k: usize, _j: usize, _gain: &mut Mat) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoDisturbance;

impl IterationDisturbance for NoDisturbance {}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerRecord {
    pub j: usize,
    /// `P^{(k,j)}`.
    pub value: Mat,
    /// `K^{(k,j)}` as used by the next step.
    pub control_gain: Mat,
    /// `‖K^{(k,j)} - K^{(k,j-1)}‖₂`.
    pub gain_change: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub k: usize,
    /// `P^k`.
    pub value: Mat,
    pub control_gain: Mat,
    /// `L^k` as used by the next outer step.
    pub disturbance_gain: Mat,
    /// `‖L^k - L^{k-1}‖₂`.
    pub gain_change: f64,
    /// Full Riccati residual at `P^k`, if a model is available.
    pub residual: Option<f64>,
    /// Gain that started the inner loop.
    pub initial_gain: Mat,
    /// Step-specific by-product of the last inner step (e.g. `DᵀPD`).
    pub aux: Option<Mat>,
    pub inner: Vec<InnerRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub outer: Vec<OuterRecord>,
}

impl IterationTrace {
    pub fn outer_iterations(&self) -> usize {
        self.outer.len()
    }

    pub fn last(&self) -> Option<&OuterRecord> {
        self.outer.last()
    }

    /// `Tr(P^k)` for every outer step.
    pub fn outer_traces(&self) -> Vec<f64> {
        self.outer.iter().map(|r| r.value.trace()).collect()
    }

    /// CSV with columns `k,j,TrP,gain_change,residual`. Inner steps carry
    /// their index `j`; the closing row of each outer step leaves `j` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,j,TrP,gain_change,residual\n");
        for rec in &self.outer {
            for inner in &rec.inner {
                let _ = writeln!(
                    out,
                    "{},{},{:.12e},{:.6e},{:.6e}",
                    rec.k,
                    inner.j,
                    inner.value.trace(),
                    inner.gain_change,
                    inner.residual
                );
            }
            let residual = rec.residual.map(|r| format!("{r:.6e}")).unwrap_or_default();
            let _ = writeln!(out, "{},,{:.12e},{:.6e},{}", rec.k, rec.value.trace(), rec.gain_change, residual);
        }
        out
    }

    /// Largest violation of `P^k ⪯ P^{k+1} ⪯ P*` (0 when the ordering holds
    /// exactly; positive values are eigenvalue deficits).
    pub fn outer_ordering_violation(&self, p_star: &Mat) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.outer.windows(2) {
            worst = worst.max(-linalg::min_eigenvalue(&(&w[1].value - &w[0].value)));
        }
        for r in &self.outer {
            worst = worst.max(-linalg::min_eigenvalue(&(p_star - &r.value)));
        }
        worst
    }

    /// Largest violation of `P^{(k,j)} ⪰ P^{(k,j+1)} ⪰ P^k` across all
    /// outer steps.
    pub fn inner_ordering_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for rec in &self.outer {
            for w in rec.inner.windows(2) {
                worst = worst.max(-linalg::min_eigenvalue(&(&w[0].value - &w[1].value)));
            }
            for inner in &rec.inner {
                worst = worst.max(-linalg::min_eigenvalue(&(&inner.value - &rec.value)));
            }
        }
        worst
    }

    /// Contraction estimate of the outer sequence against its final iterate.
    pub fn outer_contraction(&self) -> Result<f64> {
        let values: Vec<Mat> = self.outer.iter().map(|r| r.value.clone()).collect();
        estimate_contraction_rate(&values)
    }

    /// Contraction estimate of the inner sequence of outer step `index`
    /// (0-based) against its final iterate.
    pub fn inner_contraction(&self, index: usize) -> Result<f64> {
        let rec = self.outer.get(index).ok_or(Error::TooFewSteps(0))?;
        let values: Vec<Mat> = rec.inner.iter().map(|r| r.value.clone()).collect();
        estimate_contraction_rate(&values)
    }
}

/// `max_k Tr(P* - P^{k+1}) / Tr(P* - P^k)` with `P*` the last element;
/// ratios with a denominator below `1e-12` are skipped.
pub fn estimate_contraction_rate(values: &[Mat]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::TooFewSteps(values.len()));
    }
    let limit = values[values.len() - 1].trace();
    let gaps: Vec<f64> = values.iter().map(|p| (limit - p.trace()).abs()).collect();
    let mut rate: Option<f64> = None;
    for w in gaps.windows(2) {
        if w[0] > 1e-12 {
            let r = w[1] / w[0];
            rate = Some(rate.map_or(r, |acc| acc.max(r)));
        }
    }
    rate.ok_or(Error::TooFewSteps(values.len()))
}

/// Certified result of a dual-loop solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Mat,
    pub k: Mat,
    pub l: Mat,
    /// Frobenius Riccati residual (`NaN` when no model is available).
    pub residual: f64,
    /// Stability certificate of the closed loop under `(K, L)`.
    pub stable: bool,
    pub outer_iterations: usize,
}

impl RiccatiSolution {
    pub fn gains(&self) -> GainPair {
        GainPair { control: self.k.clone(), disturbance: self.l.clone() }
    }
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopFailure {
    pub error: Error,
    pub trace: IterationTrace,
}

impl From<LoopFailure> for Error {
    fn from(f: LoopFailure) -> Self {
        f.error
    }
}

/// Outcome of a single inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub last: StepResult,
    pub control_gain: Mat,
    pub records: Vec<InnerRecord>,
}

/// Policy iteration on `K` with `L` frozen, starting from `k0`.
///
/// `outer` only labels records and errors.
pub fn inner_loop<S: PolicyStep + ?Sized, H: IterationDisturbance + ?Sized>(
    step: &mut S,
    l: &Mat,
    k0: &Mat,
    stop: Stop,
    hook: &mut H,
    outer: usize,
) -> core::result::Result<InnerOutcome, (Error, Vec<InnerRecord>)> {
    let mut records = Vec::new();
    match step.is_admissible(k0, l) {
        Ok(true) => {}
        Ok(false) => return Err((Error::InitialGainNotAdmissible, records)),
        Err(e) => return Err((e, records)),
    }
    let mut gain = k0.clone();
    let mut last = None;
    for j in 1..=stop.cap() {
        if j > 1 {
            match step.is_admissible(&gain, l) {
                Ok(true) => {}
                Ok(false) => return Err((Error::LostStability { outer, inner: j - 1 }, records)),
                Err(e) => return Err((e, records)),
            }
        }
        let result = match step.step(&gain, l) {
            Ok(r) => r,
            Err(e) => return Err((e, records)),
        };
        let mut next = result.control_gain.clone();
        hook.perturb_control_gain(outer, j, &mut next);
        let change = linalg::spectral_norm(&(&next - &gain));
        records.push(InnerRecord {
            j,
            value: result.value.clone(),
            control_gain: next.clone(),
            gain_change: change,
            residual: result.residual,
        });
        gain = next;
        last = Some(result);
        if stop.done(j, change) {
            let last = last.expect("at least one step ran");
            return Ok(InnerOutcome { last, control_gain: gain, records });
        }
    }
    if stop.is_fixed() {
        if let Some(last) = last {
            return Ok(InnerOutcome { last, control_gain: gain, records });
        }
    }
    Err((Error::InnerNotConverged { outer, max: stop.cap() }, records))
}

/// Runs the dual loop from the disturbance gain `l0`.
///
/// Each outer step starts its inner loop from the previous step's gain when
/// `warm_start` is set and that gain is still admissible; otherwise the
/// step's own initializer is used. The returned solution is certified by
/// the step's admissibility test.
pub fn run_dual_loop<S: PolicyStep + ?Sized, H: IterationDisturbance + ?Sized>(
    step: &mut S,
    l0: &Mat,
    schedule: LoopSchedule,
    warm_start: bool,
    hook: &mut H,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    let mut trace = IterationTrace::default();
    let fail = |error: Error, trace: IterationTrace| LoopFailure { error, trace };
    let mut l = l0.clone();
    let mut previous_gain: Option<Mat> = None;

    for k in 1..=schedule.outer.cap() {
        let warm = match (&previous_gain, warm_start) {
            (Some(g), true) => match step.is_admissible(g, &l) {
                Ok(true) => Some(g.clone()),
                Ok(false) => None,
                Err(e) => return Err(fail(e, trace)),
            },
            _ => None,
        };
        let k0 = match warm {
            Some(g) => g,
            None => match step.initial_gain(&l) {
                Ok(g) => g,
                Err(e) => return Err(fail(e, trace)),
            },
        };
        let outcome = match inner_loop(step, &l, &k0, schedule.inner, hook, k) {
            Ok(o) => o,
            Err((e, records)) => {
                trace.outer.push(OuterRecord {
                    k,
                    value: records.last().map(|r| r.value.clone()).unwrap_or_else(|| Mat::zeros(l.ncols(), l.ncols())),
                    control_gain: k0.clone(),
                    disturbance_gain: l.clone(),
                    gain_change: f64::NAN,
                    residual: None,
                    initial_gain: k0,
                    aux: None,
                    inner: records,
                });
                return Err(fail(e, trace));
            }
        };
        let mut next_l = outcome.last.disturbance_gain.clone();
        hook.perturb_disturbance_gain(k, &mut next_l);
        let change = linalg::spectral_norm(&(&next_l - &l));
        let value = outcome.last.value.clone();
        trace.outer.push(OuterRecord {
            k,
            residual: step.game_residual(&value),
            value,
            control_gain: outcome.control_gain.clone(),
            disturbance_gain: next_l.clone(),
            gain_change: change,
            initial_gain: k0,
            aux: outcome.last.aux.clone(),
            inner: outcome.records,
        });
        l = next_l;
        previous_gain = Some(outcome.control_gain);
        if schedule.outer.done(k, change) {
            return finish(step, trace, l, previous_gain.unwrap_or_default());
        }
    }
    if schedule.outer.is_fixed() && !trace.outer.is_empty() {
        return finish(step, trace, l, previous_gain.unwrap_or_default());
    }
    let cap = schedule.outer.cap();
    Err(fail(Error::OuterNotConverged(cap), trace))
}

fn finish<S: PolicyStep + ?Sized>(
    step: &mut S,
    trace: IterationTrace,
    l: Mat,
    k: Mat,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    let last = trace.outer.last().expect("finish called with a non-empty trace");
    let p = last.value.clone();
    let stable = match step.is_admissible(&k, &l) {
        Ok(s) => s,
        Err(error) => return Err(LoopFailure { error, trace }),
    };
    let residual = last.residual.unwrap_or(f64::NAN);
    let outer_iterations = trace.outer.len();
    Ok((RiccatiSolution { p, k, l, residual, stable, outer_iterations }, trace))
}

fn certify(solution: &RiccatiSolution, trace: &IterationTrace) -> core::result::Result<(), LoopFailure> {
    if solution.stable {
        Ok(())
    } else {
        Err(LoopFailure { error: Error::NotCertified, trace: trace.clone() })
    }
}

/// Solves the SARE by the dual loop, starting from `L⁰ = 0`.
pub fn outer_loop_sare(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    cfg.validate().map_err(|error| LoopFailure { error, trace: IterationTrace::default() })?;
    let game = GameInstance::stochastic(sys, cost);
    let mut step = ModelBasedStep::new(game, init.clone(), cfg.epsilon_lmi);
    let l0 = Mat::zeros(sys.m2(), sys.n());
    let (solution, trace) = run_dual_loop(&mut step, &l0, cfg.schedule(), cfg.warm_start, &mut NoDisturbance)?;
    certify(&solution, &trace)?;
    Ok((solution, trace))
}

/// Solves the mean-field ARE by the dual loop on `[A_s, B, G | 0, 0]`,
/// starting from `L⁰ = 0`.
pub fn outer_loop_are(
    sys: &SystemModel,
    cost: &CostSpec,
    p_star: &Mat,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    let no_trace = |error| LoopFailure { error, trace: IterationTrace::default() };
    cfg.validate().map_err(no_trace)?;
    let derived = model::derived_cost_quantities(sys, cost, p_star).map_err(no_trace)?;
    let game = GameInstance::deterministic_are(sys, cost, &derived);
    let mut step = ModelBasedStep::new(game, init.clone(), cfg.epsilon_lmi);
    let l0 = Mat::zeros(sys.m2(), sys.n());
    let (solution, trace) = run_dual_loop(&mut step, &l0, cfg.schedule(), cfg.warm_start, &mut NoDisturbance)?;
    certify(&solution, &trace)?;
    Ok((solution, trace))
}

/// Solves the shifted mean-field game in `Π = S - P*` from `L_π = -L_p*`.
///
/// `stochastic` is the SARE solution; the returned value is `Π*` and the
/// gains are `(K_π, L_π)`.
pub fn outer_loop_pi(
    sys: &SystemModel,
    cost: &CostSpec,
    stochastic: &RiccatiSolution,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    let no_trace = |error| LoopFailure { error, trace: IterationTrace::default() };
    cfg.validate().map_err(no_trace)?;
    let derived = model::derived_cost_quantities(sys, cost, &stochastic.p).map_err(no_trace)?;
    let game = GameInstance::pi_transformed(sys, cost, &derived, &stochastic.gains());
    let mut step = ModelBasedStep::new(game, init.clone(), cfg.epsilon_lmi);
    let l0 = -stochastic.l.clone();
    let (solution, trace) = run_dual_loop(&mut step, &l0, cfg.schedule(), cfg.warm_start, &mut NoDisturbance)?;
    certify(&solution, &trace)?;
    Ok((solution, trace))
}
