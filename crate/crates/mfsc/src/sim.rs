//! Euler–Maruyama simulation of the agent population.
//!
//! Every sample path owns a ChaCha8 stream keyed by `(seed, purpose, path)`,
//! paths are processed in fixed-size chunks in parallel and the per-chunk
//! moment sums are merged in chunk order, so results are bitwise identical
//! regardless of the number of threads.

use mfsc_core::irl::{MomentAccumulator, MomentLayout, MomentSeries};
use mfsc_core::linalg::Vector;
use mfsc_core::model::{validate_model, CostSpec, SystemModel, Violation};
use mfsc_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

/// Paths per parallel work unit; fixed so the reduction order never changes.
const CHUNK: usize = 16;
/// State norm treated as numerical blow-up.
pub const BLOW_UP_NORM: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation setting: {0}")]
    Config(String),
    #[error("sample path {path} blew up at t = {time} (step {step})")]
    BlowUp { path: usize, step: usize, time: f64 },
    #[error(transparent)]
    Core(#[from] mfsc_core::Error),
}

/// Stream labels separating the random draws of different experiment phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Exploration data for the regressions.
    Exploration,
    /// Frequencies of the probing signals.
    Frequencies,
    /// Sample paths estimating the mean field under the learned policy.
    MeanField,
    /// The closed-loop population with decentralized strategies.
    Population,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Exploration => 1,
            Purpose::Frequencies => 2,
            Purpose::MeanField => 3,
            Purpose::Population => 4,
        }
    }

    /// Seed of this phase derived from the experiment seed.
    pub fn seed(self, seed: u64) -> u64 {
        seed ^ self.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Per-path generator: one ChaCha8 stream per path index.
pub fn path_rng(seed: u64, purpose: Purpose, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(purpose.seed(seed));
    rng.set_stream(path as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Population size `N`.
    pub agents: usize,
    /// Sample paths `N_s` used for expectations.
    pub samples: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Initial states are uniform on the box `[lower, upper]`.
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    /// Number of leading sample paths stored in full for export.
    pub keep_paths: usize,
    /// Euler–Maruyama steps per recorded grid interval.
    pub substeps: usize,
}

impl SimConfig {
    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(SimError::Config("substeps must be at least 1".into()));
        }
        if self.agents == 0 || self.samples == 0 {
            return Err(SimError::Config("agent and sample counts must be at least 1".into()));
        }
        let ratio = self.horizon / self.dt;
        if !(self.horizon > 0.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::Config(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt)));
        }
        if self.x0_lower.len() != n || self.x0_upper.len() != n {
            return Err(SimError::Config(format!("initial-state box must have {n} entries per corner")));
        }
        if self.x0_lower.iter().zip(&self.x0_upper).any(|(l, u)| !(l <= u)) {
            return Err(SimError::Config("initial-state box has lower > upper".into()));
        }
        Ok(())
    }

    /// Number of Euler steps; the grid has `steps() + 1` points.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Mean of the initial-state distribution.
    pub fn x0_mean(&self) -> Vector {
        Vector::from_iterator(self.x0_lower.len(), self.x0_lower.iter().zip(&self.x0_upper).map(|(l, u)| 0.5 * (l + u)))
    }
}

/// Sum-of-sinusoids probing signal, one frequency list per channel:
/// `ξ_c(t) = σ·Σⱼ sin(ω_{c,j} t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationSignal {
    pub amplitude: f64,
    pub frequencies: Vec<Vec<f64>>,
}

impl ExplorationSignal {
    /// Draws `count` frequencies per channel uniformly from `range`.
    pub fn draw(channels: usize, count: usize, amplitude: f64, range: (f64, f64), rng: &mut impl Rng) -> Self {
        let frequencies =
            (0..channels).map(|_| (0..count).map(|_| rng.random_range(range.0..=range.1)).collect()).collect();
        Self { amplitude, frequencies }
    }

    pub fn zero(channels: usize) -> Self {
        Self { amplitude: 0.0, frequencies: vec![Vec::new(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.frequencies.len()
    }

    pub fn max_frequency(&self) -> f64 {
        self.frequencies.iter().flatten().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    pub fn value(&self, t: f64) -> Vector {
        Vector::from_iterator(
            self.channels(),
            self.frequencies.iter().map(|ws| self.amplitude * ws.iter().map(|w| (w * t).sin()).sum::<f64>()),
        )
    }
}

/// Open-loop part of an input.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedforward {
    Zero,
    Signal(ExplorationSignal),
    /// One value per grid point.
    Samples(Vec<Vector>),
}

impl Feedforward {
    /// Values at the `points` integration times spaced `h`; `substeps` of
    /// them per recorded grid interval. Tabulated samples are interpolated
    /// linearly between grid points.
    fn tabulate(&self, channels: usize, h: f64, points: usize, substeps: usize) -> Result<Vec<f64>, SimError> {
        let mut out = vec![0.0; channels * points];
        match self {
            Feedforward::Zero => {}
            Feedforward::Signal(s) => {
                if s.channels() != channels {
                    return Err(SimError::Config("probing signal has the wrong number of channels".into()));
                }
                for i in 0..points {
                    out[i * channels..(i + 1) * channels].copy_from_slice(s.value(i as f64 * h).as_slice());
                }
            }
            Feedforward::Samples(values) => {
                let grid = (points - 1) / substeps + 1;
                if values.len() < grid || values.iter().any(|v| v.len() != channels) {
                    return Err(SimError::Config("feedforward samples do not cover the grid".into()));
                }
                for i in 0..points {
                    let (g, r) = (i / substeps, i % substeps);
                    let w = r as f64 / substeps as f64;
                    for c in 0..channels {
                        let next = if r == 0 { 0.0 } else { values[g + 1][c] };
                        out[i * channels + c] = (1.0 - w) * values[g][c] + w * next;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `u = -Kx + u_ff(t)`, `v = Lx + v_ff(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub k: Mat,
    pub l: Mat,
    pub u_ff: Feedforward,
    pub v_ff: Feedforward,
}

impl AffinePolicy {
    pub fn feedback(k: Mat, l: Mat) -> Self {
        Self { k, l, u_ff: Feedforward::Zero, v_ff: Feedforward::Zero }
    }

    /// Decentralized strategies driven by a mean-field estimate `x̂̄(t)`.
    pub fn decentralized(gains: &MeanFieldGains, mean_field: &[Vector]) -> Self {
        Self {
            k: gains.k_p.clone(),
            l: gains.l_p.clone(),
            u_ff: Feedforward::Samples(mean_field.iter().map(|m| -(&gains.k_pi * m)).collect()),
            v_ff: Feedforward::Samples(mean_field.iter().map(|m| &gains.l_pi * m).collect()),
        }
    }
}

/// The four gains of the decentralized mean-field strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGains {
    pub k_p: Mat,
    pub k_pi: Mat,
    pub l_p: Mat,
    pub l_pi: Mat,
}

impl MeanFieldGains {
    /// Feedback gains `(K_p + K_π, L_p + L_π)` that drive the mean field.
    pub fn aggregate(&self) -> AffinePolicy {
        AffinePolicy::feedback(&self.k_p + &self.k_pi, &self.l_p + &self.l_pi)
    }
}

/// `u = -K_p x_i - K_π x̂̄`, `v = L_p x_i + L_π x̂̄`.
pub fn decentralized_strategy_eval(gains: &MeanFieldGains, x_i: &Vector, mean_field: &Vector) -> (Vector, Vector) {
    let u = -(&gains.k_p * x_i) - &gains.k_pi * mean_field;
    let v = &gains.l_p * x_i + &gains.l_pi * mean_field;
    (u, v)
}

/// A stored sample path; rows are grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub index: usize,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub v: Vec<Vector>,
}

/// Per-time sample moments of a batch plus the first few full paths.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub dt: f64,
    pub moments: MomentSeries,
    pub kept: Vec<PathRecord>,
}

impl TrajectoryBatch {
    pub fn points(&self) -> usize {
        self.moments.len()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Trajectory CSV: `t,sample,x1..xn,u1..um1,v1..vm2` for the kept paths.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let layout = self.moments.layout;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string(), "sample".to_string()];
        header.extend((1..=layout.n).map(|i| format!("x{i}")));
        header.extend((1..=layout.m1).map(|i| format!("u{i}")));
        header.extend((1..=layout.m2).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for p in &self.kept {
            for step in 0..p.x.len() {
                let mut row = vec![format!("{}", self.time(step)), p.index.to_string()];
                for v in [&p.x[step], &p.u[step], &p.v[step]] {
                    row.extend(v.iter().map(|e| format!("{e:e}")));
                }
                w.write_record(&row)?;
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }
}

/// Row-major copy for allocation-free inner loops.
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn new(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    /// `out += self · x`.
    fn mul_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] += scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

struct Prepared {
    layout: MomentLayout,
    a: Dense,
    b: Dense,
    g: Dense,
    c: Dense,
    d: Dense,
    k: Dense,
    l: Dense,
    /// Feedforward at every integration time.
    u_ff: Vec<f64>,
    v_ff: Vec<f64>,
    /// Recorded grid points.
    points: usize,
    substeps: usize,
    /// Integration step.
    h: f64,
}

impl Prepared {
    fn new(sys: &SystemModel, policy: &AffinePolicy, cfg: &SimConfig) -> Result<Self, SimError> {
        let (n, m1, m2) = (sys.n(), sys.m1(), sys.m2());
        cfg.validate(n)?;
        if policy.k.shape() != (m1, n) || policy.l.shape() != (m2, n) {
            return Err(SimError::Config("policy gains do not match the model".into()));
        }
        let cost = CostSpec::new(Mat::identity(n, n), Mat::identity(m1, m1), Mat::zeros(n, n), 1.0);
        if let Some(v) = validate_model(sys, &cost)
            .into_iter()
            .find(|v| matches!(v, Violation::Dimension(_) | Violation::NonFinite(_)))
        {
            return Err(SimError::Config(v.to_string()));
        }
        let points = cfg.steps() + 1;
        let substeps = cfg.substeps;
        let h = cfg.dt / substeps as f64;
        let fine = (points - 1) * substeps + 1;
        Ok(Self {
            layout: MomentLayout::new(n, m1, m2),
            a: Dense::new(&sys.a),
            b: Dense::new(&sys.b),
            g: Dense::new(&sys.g),
            c: Dense::new(&sys.c),
            d: Dense::new(&sys.d),
            k: Dense::new(&policy.k),
            l: Dense::new(&policy.l),
            u_ff: policy.u_ff.tabulate(m1, h, fine, substeps)?,
            v_ff: policy.v_ff.tabulate(m2, h, fine, substeps)?,
            points,
            substeps,
            h,
        })
    }

    fn inputs(&self, fine_step: usize, x: &[f64], u: &mut [f64], v: &mut [f64]) {
        let (m1, m2) = (self.layout.m1, self.layout.m2);
        u.copy_from_slice(&self.u_ff[fine_step * m1..(fine_step + 1) * m1]);
        self.k.mul_add(x, -1.0, u);
        v.copy_from_slice(&self.v_ff[fine_step * m2..(fine_step + 1) * m2]);
        self.l.mul_add(x, 1.0, v);
    }

    /// Runs one path, feeding every recorded grid point to `sink`. The
    /// Brownian increments are scaled by `noise_scale` (`0` disables the
    /// noise).
    fn run_path(
        &self,
        x0: Vec<f64>,
        rng: &mut ChaCha8Rng,
        noise_scale: f64,
        path: usize,
        mut sink: impl FnMut(usize, &[f64], &[f64], &[f64]),
    ) -> Result<(), SimError> {
        let MomentLayout { n, m1, m2 } = self.layout;
        let sqrt_h = self.h.sqrt();
        let mut x = x0;
        let mut u = vec![0.0; m1];
        let mut v = vec![0.0; m2];
        let mut next = vec![0.0; n];
        let mut diffusion = vec![0.0; n];
        let last = (self.points - 1) * self.substeps;
        for fine in 0..=last {
            self.inputs(fine, &x, &mut u, &mut v);
            if fine % self.substeps == 0 {
                sink(fine / self.substeps, &x, &u, &v);
            }
            if fine == last {
                break;
            }
            next.copy_from_slice(&x);
            self.a.mul_add(&x, self.h, &mut next);
            self.b.mul_add(&u, self.h, &mut next);
            self.g.mul_add(&v, self.h, &mut next);
            if noise_scale != 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                diffusion.iter_mut().for_each(|e| *e = 0.0);
                self.c.mul_add(&x, 1.0, &mut diffusion);
                self.d.mul_add(&u, 1.0, &mut diffusion);
                for (nx, dx) in next.iter_mut().zip(&diffusion) {
                    *nx += dx * sqrt_h * noise_scale * z;
                }
            }
            std::mem::swap(&mut x, &mut next);
            let norm = x.iter().map(|e| e * e).sum::<f64>().sqrt();
            if !(norm <= BLOW_UP_NORM) {
                let step = (fine + 1).div_ceil(self.substeps);
                return Err(SimError::BlowUp { path, step, time: (fine + 1) as f64 * self.h });
            }
        }
        Ok(())
    }
}

fn sample_initial_state(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    cfg.x0_lower.iter().zip(&cfg.x0_upper).map(|(&l, &u)| if l == u { l } else { rng.random_range(l..u) }).collect()
}

/// Simulates `paths` independent agents under `policy` and returns their
/// per-time sample moments.
pub fn simulate_agents(
    sys: &SystemModel,
    policy: &AffinePolicy,
    cfg: &SimConfig,
    paths: usize,
    purpose: Purpose,
) -> Result<TrajectoryBatch, SimError> {
    if paths == 0 {
        return Err(SimError::Config("at least one sample path is required".into()));
    }
    let prep = Prepared::new(sys, policy, cfg)?;
    let chunks: Vec<usize> = (0..paths.div_ceil(CHUNK)).collect();
    let partial: Vec<Result<(MomentAccumulator, Vec<PathRecord>), SimError>> = chunks
        .par_iter()
        .map(|&c| {
            let mut acc = MomentAccumulator::new(prep.layout, cfg.dt, prep.points);
            let mut kept = Vec::new();
            for path in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                let mut rng = path_rng(cfg.seed, purpose, path);
                let x0 = sample_initial_state(cfg, &mut rng);
                let keep = path < cfg.keep_paths;
                let mut record = PathRecord { index: path, x: Vec::new(), u: Vec::new(), v: Vec::new() };
                prep.run_path(x0, &mut rng, 1.0, path, |step, x, u, v| {
                    acc.record(step, x, u, v);
                    if keep {
                        record.x.push(Vector::from_column_slice(x));
                        record.u.push(Vector::from_column_slice(u));
                        record.v.push(Vector::from_column_slice(v));
                    }
                })?;
                acc.finish_path();
                if keep {
                    kept.push(record);
                }
            }
            Ok((acc, kept))
        })
        .collect();

    let mut total = MomentAccumulator::new(prep.layout, cfg.dt, prep.points);
    let mut kept = Vec::new();
    for part in partial {
        let (acc, records) = part?;
        total.merge(&acc)?;
        kept.extend(records);
    }
    Ok(TrajectoryBatch { dt: cfg.dt, moments: total.finish()?, kept })
}

/// Noise-free Euler integration of the expected dynamics from the mean of
/// the initial-state box; returns the expected state and inputs as a
/// single-sample moment series.
pub fn expected_moments(sys: &SystemModel, policy: &AffinePolicy, cfg: &SimConfig) -> Result<MomentSeries, SimError> {
    let prep = Prepared::new(sys, policy, cfg)?;
    let mut acc = MomentAccumulator::new(prep.layout, cfg.dt, prep.points);
    let mut rng = path_rng(cfg.seed, Purpose::MeanField, 0);
    prep.run_path(cfg.x0_mean().as_slice().to_vec(), &mut rng, 0.0, 0, |step, x, u, v| acc.record(step, x, u, v))?;
    acc.finish_path();
    Ok(acc.finish()?)
}

/// Expected state trajectory `x̄(t)` (see [`expected_moments`]).
pub fn expected_trajectory(sys: &SystemModel, policy: &AffinePolicy, cfg: &SimConfig) -> Result<Vec<Vector>, SimError> {
    let series = expected_moments(sys, policy, cfg)?;
    Ok((0..series.len()).map(|i| series.mean_state(i)).collect())
}

/// Per-time sample average of the states, `x̂̄(t)`.
pub fn estimate_mean_field(batch: &TrajectoryBatch) -> Vec<Vector> {
    (0..batch.points()).map(|i| batch.moments.mean_state(i)).collect()
}

/// Root-mean-square distance between two trajectories on the same grid.
pub fn rms_gap(a: &[Vector], b: &[Vector]) -> f64 {
    let len = a.len().min(b.len());
    if len == 0 {
        return f64::NAN;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / len as f64).sqrt()
}

/// Population of `cfg.agents` agents under the decentralized strategies;
/// the population average is [`estimate_mean_field`] of the result.
pub fn simulate_population(
    sys: &SystemModel,
    gains: &MeanFieldGains,
    mean_field: &[Vector],
    cfg: &SimConfig,
) -> Result<TrajectoryBatch, SimError> {
    let policy = AffinePolicy::decentralized(gains, mean_field);
    simulate_agents(sys, &policy, cfg, cfg.agents, Purpose::Population)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, c: f64) -> SystemModel {
        let m = |v: f64| Mat::from_element(1, 1, v);
        SystemModel::new(m(a), m(0.0), m(0.0), m(c), m(0.0))
    }

    fn cfg(x0: f64, horizon: f64, dt: f64) -> SimConfig {
        SimConfig {
            agents: 1,
            samples: 1,
            dt,
            horizon,
            seed: 7,
            x0_lower: vec![x0],
            x0_upper: vec![x0],
            keep_paths: 1,
            substeps: 1,
        }
    }

    #[test]
    fn frozen_dynamics_keep_the_state() {
        let policy = AffinePolicy::feedback(Mat::zeros(1, 1), Mat::zeros(1, 1));
        let batch = simulate_agents(&scalar(0.0, 0.0), &policy, &cfg(1.5, 1.0, 0.01), 3, Purpose::Exploration).unwrap();
        assert!(estimate_mean_field(&batch).iter().all(|x| x[0] == 1.5));
    }

    #[test]
    fn deterministic_decay_is_first_order_accurate() {
        let policy = AffinePolicy::feedback(Mat::zeros(1, 1), Mat::zeros(1, 1));
        let err = |dt: f64| {
            let xs = expected_trajectory(&scalar(-1.0, 0.0), &policy, &cfg(1.0, 1.0, dt)).unwrap();
            (xs.last().unwrap()[0] - (-1.0_f64).exp()).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 < 1e-2 && (e1 / e2 - 2.0).abs() < 0.1, "{e1} {e2}");
    }

    #[test]
    fn blow_up_is_reported() {
        let policy = AffinePolicy::feedback(Mat::zeros(1, 1), Mat::zeros(1, 1));
        let err = simulate_agents(&scalar(50.0, 0.0), &policy, &cfg(1.0, 1.0, 0.01), 1, Purpose::Exploration);
        assert!(matches!(err, Err(SimError::BlowUp { path: 0, .. })));
    }

    #[test]
    fn horizon_must_be_on_the_grid() {
        assert!(cfg(1.0, 1.005, 0.01).validate(1).is_err());
        assert!(cfg(1.0, 14.0, 0.001).validate(1).is_ok());
    }

    #[test]
    fn strategy_with_matching_states_uses_summed_gains() {
        let gains = MeanFieldGains {
            k_p: Mat::from_row_slice(1, 2, &[1.0, 2.0]),
            k_pi: Mat::from_row_slice(1, 2, &[0.5, -1.0]),
            l_p: Mat::from_row_slice(1, 2, &[0.1, 0.0]),
            l_pi: Mat::from_row_slice(1, 2, &[0.0, 0.3]),
        };
        let x = Vector::from_vec(vec![1.0, -2.0]);
        let (u, v) = decentralized_strategy_eval(&gains, &x, &x);
        assert!((u[0] - -(1.5 * 1.0 + 1.0 * -2.0)).abs() < 1e-15);
        assert!((v[0] - (0.1 * 1.0 + 0.3 * -2.0)).abs() < 1e-15);
        let (u0, _) = decentralized_strategy_eval(&gains, &x, &Vector::zeros(2));
        assert_eq!(u0, -(&gains.k_p * &x));
    }
}
