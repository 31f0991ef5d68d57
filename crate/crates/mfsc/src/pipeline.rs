//! Model-based solves and the data-driven learning pipeline.

use mfsc_core::dualloop::{self, DualLoopConfig, IterationTrace, LoopFailure, RiccatiSolution};
use mfsc_core::irl::{self, DataWindow, FeatureSource, IdentifiedDrift, IntegralFeatures, PiKnowns, RankReport};
use mfsc_core::linalg::{self, Vector};
use mfsc_core::model::{self, CostSpec, DerivedCost, SystemModel};
use mfsc_core::stabilizer::InitStrategy;
use mfsc_core::Mat;
use thiserror::Error;

use crate::sim::{
    self, AffinePolicy, ExplorationSignal, Feedforward, MeanFieldGains, Purpose, SimConfig, SimError, TrajectoryBatch,
};

/// Stage of the workflow a failure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    StochasticSolve,
    DeterministicSolve,
    ShiftedSolve,
    Simulation,
    Features,
    Identification,
    LearnStochastic,
    LearnShifted,
    MeanField,
    Population,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Phase::StochasticSolve => "stochastic Riccati solve",
            Phase::DeterministicSolve => "deterministic Riccati solve",
            Phase::ShiftedSolve => "shifted mean-field solve",
            Phase::Simulation => "exploration simulation",
            Phase::Features => "integral features",
            Phase::Identification => "system identification",
            Phase::LearnStochastic => "learned stochastic loop",
            Phase::LearnShifted => "learned shifted loop",
            Phase::MeanField => "mean-field estimation",
            Phase::Population => "population simulation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("{phase}: {source}")]
    Solver { phase: Phase, source: mfsc_core::Error, trace: Option<IterationTrace> },
    #[error("{phase}: {source}")]
    Simulation { phase: Phase, source: SimError },
    #[error("rank condition failed: {}", rank_message(.0))]
    Rank(RankReport),
}

fn rank_message(r: &RankReport) -> String {
    let mut parts = Vec::new();
    if !r.stochastic_ok() {
        parts.push(format!(
            "stochastic features rank {} < {} (excitation of the stochastic regression)",
            r.stochastic_rank, r.stochastic_required
        ));
    }
    if !r.mean_field_ok() {
        parts.push(format!(
            "mean-field features rank {} < {} (excitation of the mean-field regression)",
            r.mean_field_rank, r.mean_field_required
        ));
    }
    parts.join("; ")
}

impl PipelineError {
    fn solver(phase: Phase) -> impl FnOnce(LoopFailure) -> Self {
        move |f| PipelineError::Solver { phase, source: f.error, trace: Some(f.trace) }
    }

    fn core(phase: Phase) -> impl FnOnce(mfsc_core::Error) -> Self {
        move |source| PipelineError::Solver { phase, source, trace: None }
    }

    fn sim(phase: Phase) -> impl FnOnce(SimError) -> Self {
        move |source| PipelineError::Simulation { phase, source }
    }
}

/// A dual-loop run: its solution and iteration history.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRun {
    pub solution: RiccatiSolution,
    pub trace: IterationTrace,
}

impl From<(RiccatiSolution, IterationTrace)> for LoopRun {
    fn from((solution, trace): (RiccatiSolution, IterationTrace)) -> Self {
        Self { solution, trace }
    }
}

/// Model-based solutions of the stochastic equation, the deterministic
/// mean-field equation and the shifted game.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSolution {
    pub stochastic: LoopRun,
    pub deterministic: LoopRun,
    pub shifted: LoopRun,
    pub derived: DerivedCost,
}

impl ModelSolution {
    pub fn mean_field_gains(&self) -> MeanFieldGains {
        MeanFieldGains {
            k_p: self.stochastic.solution.k.clone(),
            k_pi: self.shifted.solution.k.clone(),
            l_p: self.stochastic.solution.l.clone(),
            l_pi: self.shifted.solution.l.clone(),
        }
    }

    /// `Λ* = DᵀP*D`.
    pub fn lambda(&self, sys: &SystemModel) -> Mat {
        linalg::symmetrize(&(sys.d.transpose() * &self.stochastic.solution.p * &sys.d))
    }
}

pub fn solve_model_based(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
) -> Result<ModelSolution, PipelineError> {
    let stochastic: LoopRun =
        dualloop::outer_loop_sare(sys, cost, cfg, init).map_err(PipelineError::solver(Phase::StochasticSolve))?.into();
    let p_star = &stochastic.solution.p;
    let derived =
        model::derived_cost_quantities(sys, cost, p_star).map_err(PipelineError::core(Phase::DeterministicSolve))?;
    let deterministic: LoopRun = dualloop::outer_loop_are(sys, cost, p_star, cfg, init)
        .map_err(PipelineError::solver(Phase::DeterministicSolve))?
        .into();
    let shifted: LoopRun = dualloop::outer_loop_pi(sys, cost, &stochastic.solution, cfg, init)
        .map_err(PipelineError::solver(Phase::ShiftedSolve))?
        .into();
    Ok(ModelSolution { stochastic, deterministic, shifted, derived })
}

/// Window layout, exploration design and initialization of the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlConfig {
    /// Start `t₁` and end `t_l` of the data collection interval.
    pub t1: f64,
    pub t_end: f64,
    /// Window length `T`.
    pub window: f64,
    /// Window spacing `T_s`.
    pub step: f64,
    pub k_exp: Mat,
    pub l_exp: Mat,
    pub sigma1: f64,
    pub sigma2: f64,
    pub n1: usize,
    pub n2: usize,
    pub omega1: (f64, f64),
    pub omega2: (f64, f64),
    /// When false the probing signals are switched off.
    pub explore: bool,
    /// Decay margin for LMI initial gains on the identified drift.
    pub decay_margin: f64,
    /// Where the mean-field features come from.
    pub mean_source: MeanSource,
}

/// Source of the expected trajectory used by the mean-field regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanSource {
    /// Noise-free integration of the expected dynamics under the
    /// exploration inputs.
    Expected,
    /// Per-time sample means of the exploration paths.
    SampleMean,
}

impl MeanSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanSource::Expected => "expected",
            MeanSource::SampleMean => "sample",
        }
    }
}

impl std::str::FromStr for MeanSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expected" => Ok(MeanSource::Expected),
            "sample" => Ok(MeanSource::SampleMean),
            other => Err(format!("unknown mean source '{other}' (expected 'expected' or 'sample')")),
        }
    }
}

impl IrlConfig {
    pub fn windows(&self) -> Result<DataWindow, mfsc_core::Error> {
        DataWindow::covering(self.t1, self.t_end, self.window, self.step)
    }

    /// Probing signals drawn once per experiment from `seed`.
    pub fn signals(&self, seed: u64) -> (ExplorationSignal, ExplorationSignal) {
        let (m1, m2) = (self.k_exp.nrows(), self.l_exp.nrows());
        if !self.explore {
            return (ExplorationSignal::zero(m1), ExplorationSignal::zero(m2));
        }
        let mut rng = sim::path_rng(seed, Purpose::Frequencies, 0);
        let xi1 = ExplorationSignal::draw(m1, self.n1, self.sigma1, self.omega1, &mut rng);
        let xi2 = ExplorationSignal::draw(m2, self.n2, self.sigma2, self.omega2, &mut rng);
        (xi1, xi2)
    }

    pub fn exploration_policy(&self, seed: u64) -> AffinePolicy {
        let (xi1, xi2) = self.signals(seed);
        AffinePolicy {
            k: self.k_exp.clone(),
            l: self.l_exp.clone(),
            u_ff: Feedforward::Signal(xi1),
            v_ff: Feedforward::Signal(xi2),
        }
    }
}

/// Everything the data-driven pipeline learns.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSolution {
    pub rank: RankReport,
    pub identified: IdentifiedDrift,
    pub stochastic: LoopRun,
    /// `Λ̂ = (DᵀPD)^` from the last stochastic step.
    pub lambda: Mat,
    pub shifted: LoopRun,
    pub gains: MeanFieldGains,
    /// `x̂̄(t)` under `u = -(K̂_p + K̂_π)x`, `v = (L̂_p + L̂_π)x`.
    pub mean_field: Vec<Vector>,
    /// Exploration batch (moments and the stored sample paths).
    pub exploration: TrajectoryBatch,
}

/// Features of the exploration data: `(stochastic, mean-field)`.
pub fn collect_features(
    sys: &SystemModel,
    sim_cfg: &SimConfig,
    irl_cfg: &IrlConfig,
) -> Result<(TrajectoryBatch, IntegralFeatures, IntegralFeatures), PipelineError> {
    let policy = irl_cfg.exploration_policy(sim_cfg.seed);
    let batch = sim::simulate_agents(sys, &policy, sim_cfg, sim_cfg.samples, Purpose::Exploration)
        .map_err(PipelineError::sim(Phase::Simulation))?;
    let window = irl_cfg.windows().map_err(PipelineError::core(Phase::Features))?;
    let stochastic = irl::integral_features(&batch.moments, &window, FeatureSource::Sample)
        .map_err(PipelineError::core(Phase::Features))?;
    let mean = match irl_cfg.mean_source {
        MeanSource::Expected => {
            let expected =
                sim::expected_moments(sys, &policy, sim_cfg).map_err(PipelineError::sim(Phase::Simulation))?;
            irl::integral_features(&expected, &window, FeatureSource::MeanField)
        }
        MeanSource::SampleMean => irl::integral_features(&batch.moments, &window, FeatureSource::MeanField),
    }
    .map_err(PipelineError::core(Phase::Features))?;
    Ok((batch, stochastic, mean))
}

/// Runs the full data-driven workflow. `sys` is only used to generate data.
pub fn run_pipeline(
    sys: &SystemModel,
    cost: &CostSpec,
    dl_cfg: &DualLoopConfig,
    sim_cfg: &SimConfig,
    irl_cfg: &IrlConfig,
    init: &InitStrategy,
) -> Result<LearnedSolution, PipelineError> {
    let (exploration, stochastic_features, mean_features) = collect_features(sys, sim_cfg, irl_cfg)?;
    let rank = irl::rank_conditions(&stochastic_features, &mean_features);
    if !(rank.stochastic_ok() && rank.mean_field_ok()) {
        return Err(PipelineError::Rank(rank));
    }
    let identified = irl::identify_system_rows(&mean_features).map_err(PipelineError::core(Phase::Identification))?;
    let surrogate = identified.to_model();

    let stochastic: LoopRun =
        irl::learn_sare(&stochastic_features, cost, Some(&surrogate), dl_cfg, init, irl_cfg.decay_margin)
            .map_err(PipelineError::solver(Phase::LearnStochastic))?
            .into();
    let lambda = stochastic.trace.last().and_then(|r| r.aux.clone()).unwrap_or_else(|| Mat::zeros(sys.m1(), sys.m1()));

    let known = PiKnowns::new(&stochastic.solution.gains(), &lambda, cost);
    let shifted: LoopRun = irl::learn_pi(&mean_features, &known, Some(&identified), dl_cfg, init, irl_cfg.decay_margin)
        .map_err(PipelineError::solver(Phase::LearnShifted))?
        .into();

    let gains = MeanFieldGains {
        k_p: stochastic.solution.k.clone(),
        k_pi: shifted.solution.k.clone(),
        l_p: stochastic.solution.l.clone(),
        l_pi: shifted.solution.l.clone(),
    };
    let mean_field = mean_field_estimate(sys, &gains, sim_cfg)?;
    Ok(LearnedSolution { rank, identified, stochastic, lambda, shifted, gains, mean_field, exploration })
}

/// `x̂̄(t)`: sample average of `N_s` paths under the aggregate policy
/// `u = -(K_p + K_π)x`, `v = (L_p + L_π)x`.
pub fn mean_field_estimate(
    sys: &SystemModel,
    gains: &MeanFieldGains,
    sim_cfg: &SimConfig,
) -> Result<Vec<Vector>, PipelineError> {
    let batch = sim::simulate_agents(sys, &gains.aggregate(), sim_cfg, sim_cfg.samples, Purpose::MeanField)
        .map_err(PipelineError::sim(Phase::MeanField))?;
    Ok(sim::estimate_mean_field(&batch))
}

/// Column names of the error table, in order.
pub const TABLE_COLUMNS: [&str; 7] = ["P", "L_p", "K_p", "Lambda", "Pi", "L_pi", "K_pi"];

/// Relative spectral-norm errors of the learned iterates against the
/// model-based ones at the same outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub k: usize,
    pub errors: [f64; 7],
}

fn relative_spectral(est: &Mat, truth: &Mat) -> f64 {
    let scale = linalg::spectral_norm(truth);
    let diff = linalg::spectral_norm(&(est - truth));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// One row per outer iteration of the longer learned loop; a loop that
/// already stopped is compared through its final iterate.
pub fn error_table(learned: &LearnedSolution, truth: &ModelSolution, sys: &SystemModel) -> Vec<TableRow> {
    let pick = |trace: &IterationTrace, k: usize| trace.outer.get(k.min(trace.outer.len()).saturating_sub(1)).cloned();
    let rows = learned.stochastic.trace.outer.len().max(learned.shifted.trace.outer.len());
    let lambda_of = |r: &dualloop::OuterRecord| {
        r.aux.clone().unwrap_or_else(|| linalg::symmetrize(&(sys.d.transpose() * &r.value * &sys.d)))
    };
    (1..=rows)
        .filter_map(|k| {
            let (ls, ms) = (pick(&learned.stochastic.trace, k)?, pick(&truth.stochastic.trace, k)?);
            let (lp, mp) = (pick(&learned.shifted.trace, k)?, pick(&truth.shifted.trace, k)?);
            Some(TableRow {
                k,
                errors: [
                    relative_spectral(&ls.value, &ms.value),
                    relative_spectral(&ls.disturbance_gain, &ms.disturbance_gain),
                    relative_spectral(&ls.control_gain, &ms.control_gain),
                    relative_spectral(&lambda_of(&ls), &lambda_of(&ms)),
                    relative_spectral(&lp.value, &mp.value),
                    relative_spectral(&lp.disturbance_gain, &mp.disturbance_gain),
                    relative_spectral(&lp.control_gain, &mp.control_gain),
                ],
            })
        })
        .collect()
}

/// RMS gap between the population average under the decentralized
/// strategies and `x̂̄`, for one population size and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyPoint {
    pub agents: usize,
    pub seed: u64,
    pub rms_gap: f64,
}

pub fn consistency_study(
    sys: &SystemModel,
    gains: &MeanFieldGains,
    mean_field: &[Vector],
    sim_cfg: &SimConfig,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<ConsistencyPoint>, PipelineError> {
    let mut out = Vec::new();
    for &agents in sizes {
        for &seed in seeds {
            let cfg = SimConfig { agents, seed, ..sim_cfg.clone() };
            let batch = sim::simulate_population(sys, gains, mean_field, &SimConfig { keep_paths: 0, ..cfg })
                .map_err(PipelineError::sim(Phase::Population))?;
            let avg = sim::estimate_mean_field(&batch);
            out.push(ConsistencyPoint { agents, seed, rms_gap: sim::rms_gap(&avg, mean_field) });
        }
    }
    Ok(out)
}

/// Mean RMS gap per population size, in the order of first appearance.
pub fn mean_gap_by_size(points: &[ConsistencyPoint]) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = Vec::new();
    for p in points {
        if !sizes.contains(&p.agents) {
            sizes.push(p.agents);
        }
    }
    sizes
        .into_iter()
        .map(|n| {
            let gaps: Vec<f64> = points.iter().filter(|p| p.agents == n).map(|p| p.rms_gap).collect();
            (n, gaps.iter().sum::<f64>() / gaps.len() as f64)
        })
        .collect()
}
