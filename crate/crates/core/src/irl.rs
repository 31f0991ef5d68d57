//! Integral reinforcement learning: least-squares versions of the dual-loop
//! steps built from trajectory data.
//!
//! Along any input `(u, v)` the closed-loop value identity of the current
//! policy `(K, L)` reads, after Itô's formula and taking expectations over
//! `[t, t + T]`,
//!
//! ```text
//! E[xᵀPx]|ₜᵗ⁺ᵀ - 2∫E[(u + Kx)ᵀ M x] - 2γ²∫E[(v - Lx)ᵀ L' x]
//!     - ∫E[uᵀΛu] + ∫E[(Kx)ᵀΛ(Kx)] = -∫E[xᵀ(Q - γ²LᵀL + KᵀRK)x],
//! ```
//!
//! with unknowns `P`, `M = (R + Λ)K⁺`, `L' = γ⁻²GᵀP` and `Λ = DᵀPD`. Every
//! term is linear in the per-time second moments `E[xxᵀ]`, `E[uxᵀ]`,
//! `E[vxᵀ]`, `E[uuᵀ]`, so those moments (averaged over sample paths) are
//! all the data the regressions need. The shifted mean-field game uses the
//! same construction on the sample-mean trajectory with `Υ`, `K_p*`, `L_p*`
//! known.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dualloop::{
    self, DualLoopConfig, IterationTrace, LoopFailure, NoDisturbance, PolicyStep, RiccatiSolution, StepResult,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector, RANK_RTOL};
use crate::lyap::{GeneralizedLyapunov, SymmetricCodec};
use crate::model::{self, CostSpec, GainPair, SystemModel};
use crate::stabilizer::{self, InitStrategy};

/// Dimensions of the recorded channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentLayout {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

impl MomentLayout {
    pub fn new(n: usize, m1: usize, m2: usize) -> Self {
        Self { n, m1, m2 }
    }

    /// Entries per time point: `xxᵀ`, `uxᵀ`, `vxᵀ`, `uuᵀ`, `x`, `u`, `v`.
    pub fn width(&self) -> usize {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        n * n + m1 * n + m2 * n + m1 * m1 + n + m1 + m2
    }

    fn write(&self, out: &mut [f64], x: &[f64], u: &[f64], v: &[f64]) {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        let mut idx = 0;
        // Column-major outer products.
        for c in 0..n {
            for r in 0..n {
                out[idx] += x[r] * x[c];
                idx += 1;
            }
        }
        for c in 0..n {
            for r in 0..m1 {
                out[idx] += u[r] * x[c];
                idx += 1;
            }
        }
        for c in 0..n {
            for r in 0..m2 {
                out[idx] += v[r] * x[c];
                idx += 1;
            }
        }
        for c in 0..m1 {
            for r in 0..m1 {
                out[idx] += u[r] * u[c];
                idx += 1;
            }
        }
        for s in [x, u, v] {
            for value in s {
                out[idx] += value;
                idx += 1;
            }
        }
    }
}

/// Running sums of per-time moments over sample paths.
///
/// Sums are accumulated in the order paths are added; merging accumulators
/// in a fixed order keeps results bitwise reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    pub layout: MomentLayout,
    pub dt: f64,
    steps: usize,
    sums: Vec<f64>,
    count: usize,
}

impl MomentAccumulator {
    /// Accumulator for `steps` grid points spaced `dt` apart.
    pub fn new(layout: MomentLayout, dt: f64, steps: usize) -> Self {
        Self { layout, dt, steps, sums: vec![0.0; steps * layout.width()], count: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds the sample at grid point `step` of the path currently being
    /// recorded; call [`MomentAccumulator::finish_path`] after the last one.
    pub fn record(&mut self, step: usize, x: &[f64], u: &[f64], v: &[f64]) {
        let w = self.layout.width();
        self.layout.write(&mut self.sums[step * w..(step + 1) * w], x, u, v);
    }

    pub fn finish_path(&mut self) {
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.layout != self.layout || other.steps != self.steps {
            return Err(Error::Dimension("cannot merge accumulators of different shape".into()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// Sample means at every grid point.
    pub fn finish(&self) -> Result<MomentSeries> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("no sample paths recorded".into()));
        }
        let scale = 1.0 / self.count as f64;
        let data: Vec<f64> = self.sums.iter().map(|s| s * scale).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory moments".into()));
        }
        Ok(MomentSeries { layout: self.layout, dt: self.dt, samples: self.count, data })
    }
}

/// Per-time sample moments on a uniform grid `t = i·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub layout: MomentLayout,
    pub dt: f64,
    /// Number of sample paths averaged.
    pub samples: usize,
    data: Vec<f64>,
}

/// Moments of the recorded channels at a single time point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMoments {
    /// `E[xxᵀ]`.
    pub xx: Mat,
    /// `E[uxᵀ]`.
    pub ux: Mat,
    /// `E[vxᵀ]`.
    pub vx: Mat,
    /// `E[uuᵀ]`.
    pub uu: Mat,
    pub x: Vector,
    pub u: Vector,
    pub v: Vector,
}

impl MomentSeries {
    /// Series from moments known in closed form (e.g. propagated moment
    /// equations) rather than from sample paths.
    pub fn from_moments(layout: MomentLayout, dt: f64, points: &[PointMoments]) -> Result<Self> {
        let MomentLayout { n, m1, m2 } = layout;
        let mut data: Vec<f64> = Vec::with_capacity(points.len() * layout.width());
        for p in points {
            let shapes = [
                (p.xx.shape(), (n, n)),
                (p.ux.shape(), (m1, n)),
                (p.vx.shape(), (m2, n)),
                (p.uu.shape(), (m1, m1)),
                ((p.x.len(), 1), (n, 1)),
                ((p.u.len(), 1), (m1, 1)),
                ((p.v.len(), 1), (m2, 1)),
            ];
            if shapes.iter().any(|(got, want)| got != want) {
                return Err(Error::Dimension("point moments do not match the layout".into()));
            }
            for m in [&p.xx, &p.ux, &p.vx, &p.uu] {
                data.extend(m.iter());
            }
            for v in [&p.x, &p.u, &p.v] {
                data.extend(v.iter());
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory moments".into()));
        }
        Ok(Self { layout, dt, samples: 0, data })
    }
}

/// Which second moments the integral features are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Sample averages of `xxᵀ`, `uxᵀ`, … (the stochastic regression).
    Sample,
    /// Outer products of the sample-mean trajectory `x̄x̄ᵀ`, `ūx̄ᵀ`, …
    /// (the deterministic mean-field regression).
    MeanField,
}

impl MomentSeries {
    pub fn len(&self) -> usize {
        self.data.len() / self.layout.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn record(&self, step: usize) -> &[f64] {
        let w = self.layout.width();
        &self.data[step * w..(step + 1) * w]
    }

    fn offsets(&self) -> [usize; 7] {
        let (n, m1, m2) = (self.layout.n, self.layout.m1, self.layout.m2);
        let xx = 0;
        let ux = xx + n * n;
        let vx = ux + m1 * n;
        let uu = vx + m2 * n;
        let x = uu + m1 * m1;
        let u = x + n;
        let v = u + m1;
        [xx, ux, vx, uu, x, u, v]
    }

    /// Sample mean of the state at grid point `step`.
    pub fn mean_state(&self, step: usize) -> Vector {
        let o = self.offsets();
        Vector::from_column_slice(&self.record(step)[o[4]..o[4] + self.layout.n])
    }

    pub fn mean_control(&self, step: usize) -> Vector {
        let o = self.offsets();
        Vector::from_column_slice(&self.record(step)[o[5]..o[5] + self.layout.m1])
    }

    pub fn mean_disturbance(&self, step: usize) -> Vector {
        let o = self.offsets();
        Vector::from_column_slice(&self.record(step)[o[6]..o[6] + self.layout.m2])
    }

    /// `E[xxᵀ]` at grid point `step`.
    pub fn second_moment(&self, step: usize) -> Mat {
        let n = self.layout.n;
        Mat::from_column_slice(n, n, &self.record(step)[..n * n])
    }

    /// Flattened `[xxᵀ, uxᵀ, vxᵀ, uuᵀ]` at `step` for the chosen source.
    fn quadratic_record(&self, step: usize, source: FeatureSource) -> Vec<f64> {
        let o = self.offsets();
        let rec = self.record(step);
        match source {
            FeatureSource::Sample => rec[..o[4]].to_vec(),
            FeatureSource::MeanField => {
                let x = &rec[o[4]..o[5]];
                let u = &rec[o[5]..o[6]];
                let v = &rec[o[6]..];
                let mut out = vec![0.0; self.layout.width()];
                self.layout.write(&mut out, x, u, v);
                out.truncate(o[4]);
                out
            }
        }
    }
}

/// Regression windows `[tᵢ, tᵢ + T]`, `tᵢ = t₁ + (i - 1)T_s`, `i = 1..=l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataWindow {
    pub t1: f64,
    pub count: usize,
    /// Window length `T`.
    pub length: f64,
    /// Spacing of window starts `T_s`.
    pub step: f64,
}

impl DataWindow {
    /// All windows of length `length` starting every `step` inside
    /// `[t1, t_end]`.
    pub fn covering(t1: f64, t_end: f64, length: f64, step: f64) -> Result<Self> {
        if !(length > 0.0 && step > 0.0 && t_end - t1 >= length) {
            return Err(Error::WindowOutOfRange(format!("cannot fit windows of length {length} in [{t1}, {t_end}]")));
        }
        let count = libm::floor((t_end - t1 - length) / step + 1e-9) as usize + 1;
        Ok(Self { t1, count, length, step })
    }

    /// Grid indices `(start, end)` of every window on a grid of spacing `dt`
    /// with `points` samples.
    pub fn indices(&self, dt: f64, points: usize) -> Result<Vec<(usize, usize)>> {
        let to_index = |t: f64, what: &str| -> Result<usize> {
            let r = t / dt;
            let i = libm::round(r);
            if (r - i).abs() > 1e-6 || i < 0.0 {
                return Err(Error::WindowOutOfRange(format!("{what} {t} is not on the grid dt = {dt}")));
            }
            Ok(i as usize)
        };
        if self.count == 0 {
            return Err(Error::WindowOutOfRange("no windows".into()));
        }
        let width = to_index(self.length, "window length")?;
        let stride = to_index(self.step, "window step")?;
        let first = to_index(self.t1, "start time")?;
        if width == 0 {
            return Err(Error::WindowOutOfRange("window shorter than the grid step".into()));
        }
        let last_end = first + (self.count - 1) * stride + width;
        if last_end >= points {
            return Err(Error::WindowOutOfRange(format!(
                "last window ends at t = {} beyond the recorded horizon {}",
                last_end as f64 * dt,
                (points.saturating_sub(1)) as f64 * dt
            )));
        }
        Ok((0..self.count).map(|i| (first + i * stride, first + i * stride + width)).collect())
    }
}

/// Integrated second moments over each window, one row per window.
///
/// Matrix-valued integrals are stored column-major in each row: `ixx` holds
/// `∫xxᵀ` (so its row is also `∫x⊗x`), `iux` holds `∫uxᵀ` (equal to
/// `∫x⊗u`), `ivx` holds `∫vxᵀ` and `iuu` holds `∫uuᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralFeatures {
    pub layout: MomentLayout,
    pub window: DataWindow,
    pub source: FeatureSource,
    /// `vecm(2xxᵀ - diag(x)²)` at the window end minus the window start.
    pub delta: Mat,
    pub ixx: Mat,
    pub iux: Mat,
    pub ivx: Mat,
    pub iuu: Mat,
}

impl IntegralFeatures {
    pub fn rows(&self) -> usize {
        self.delta.nrows()
    }

    fn block(m: &Mat, row: usize, rows: usize, cols: usize) -> Mat {
        Mat::from_iterator(rows, cols, m.row(row).iter().copied())
    }

    /// `∫xxᵀ` over window `row`.
    pub fn xx(&self, row: usize) -> Mat {
        Self::block(&self.ixx, row, self.layout.n, self.layout.n)
    }

    /// `∫uxᵀ` over window `row`.
    pub fn ux(&self, row: usize) -> Mat {
        Self::block(&self.iux, row, self.layout.m1, self.layout.n)
    }

    pub fn vx(&self, row: usize) -> Mat {
        Self::block(&self.ivx, row, self.layout.m2, self.layout.n)
    }

    pub fn uu(&self, row: usize) -> Mat {
        Self::block(&self.iuu, row, self.layout.m1, self.layout.m1)
    }

    /// `I_x`: rows `∫vecm(2xxᵀ - diag(x)²)`.
    pub fn i_x(&self) -> Mat {
        let codec = SymmetricCodec::new(self.layout.n);
        let mut out = Mat::zeros(self.rows(), codec.dim());
        for r in 0..self.rows() {
            out.set_row(r, &codec.moment_feature(&self.xx(r)).transpose());
        }
        out
    }

    /// `I_u`: rows `∫vecm(2uuᵀ - diag(u)²)`.
    pub fn i_u(&self) -> Mat {
        let codec = SymmetricCodec::new(self.layout.m1);
        let mut out = Mat::zeros(self.rows(), codec.dim());
        for r in 0..self.rows() {
            out.set_row(r, &codec.moment_feature(&self.uu(r)).transpose());
        }
        out
    }
}

/// Builds the window features by cumulative trapezoidal integration.
pub fn integral_features(
    series: &MomentSeries,
    window: &DataWindow,
    source: FeatureSource,
) -> Result<IntegralFeatures> {
    let layout = series.layout;
    let (n, m1, m2) = (layout.n, layout.m1, layout.m2);
    let points = series.len();
    let idx = window.indices(series.dt, points)?;
    let last = idx.last().map(|w| w.1).unwrap_or(0);
    let width = n * n + m1 * n + m2 * n + m1 * m1;

    // Cumulative trapezoid of every quadratic channel up to the last window.
    let first = idx[0].0;
    let mut cumulative = vec![0.0; (last - first + 1) * width];
    let mut prev = series.quadratic_record(first, source);
    let mut firsts = vec![prev.clone()];
    for step in first + 1..=last {
        let cur = series.quadratic_record(step, source);
        let base = (step - first) * width;
        for c in 0..width {
            cumulative[base + c] = cumulative[base - width + c] + 0.5 * series.dt * (prev[c] + cur[c]);
        }
        firsts.push(cur.clone());
        prev = cur;
    }

    let l = idx.len();
    let codec = SymmetricCodec::new(n);
    let mut delta = Mat::zeros(l, codec.dim());
    let mut ixx = Mat::zeros(l, n * n);
    let mut iux = Mat::zeros(l, m1 * n);
    let mut ivx = Mat::zeros(l, m2 * n);
    let mut iuu = Mat::zeros(l, m1 * m1);
    for (row, (s, e)) in idx.iter().enumerate() {
        let (bs, be) = ((s - first) * width, (e - first) * width);
        let integral: Vec<f64> = (0..width).map(|c| cumulative[be + c] - cumulative[bs + c]).collect();
        let mut off = 0;
        for (target, size) in [(&mut ixx, n * n), (&mut iux, m1 * n), (&mut ivx, m2 * n), (&mut iuu, m1 * m1)] {
            for c in 0..size {
                target[(row, c)] = integral[off + c];
            }
            off += size;
        }
        let at = |i: usize| Mat::from_column_slice(n, n, &firsts[i - first][..n * n]);
        let d = codec.moment_feature(&at(*e)) - codec.moment_feature(&at(*s));
        delta.set_row(row, &d.transpose());
    }
    Ok(IntegralFeatures { layout, window: *window, source, delta, ixx, iux, ivx, iuu })
}

/// Achieved and required ranks of the two data matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankReport {
    pub stochastic_rank: usize,
    pub stochastic_required: usize,
    pub mean_field_rank: usize,
    pub mean_field_required: usize,
}

impl RankReport {
    pub fn stochastic_ok(&self) -> bool {
        self.stochastic_rank >= self.stochastic_required
    }

    pub fn mean_field_ok(&self) -> bool {
        self.mean_field_rank >= self.mean_field_required
    }
}

/// Numerical ranks (singular values above `1e-8·σ_max`) of
/// `[I_x, I_xu, I_xv, I_u]` and `[I_x̄, I_x̄ū, I_x̄v̄]`.
pub fn rank_conditions(stochastic: &IntegralFeatures, mean_field: &IntegralFeatures) -> RankReport {
    let MomentLayout { n, m1, m2 } = stochastic.layout;
    let q = |k: usize| k * (k + 1) / 2;
    let stoch = hstack(&[&stochastic.i_x(), &stochastic.iux, &stochastic.ivx, &stochastic.i_u()]);
    let mean = hstack(&[&mean_field.i_x(), &mean_field.iux, &mean_field.ivx]);
    RankReport {
        stochastic_rank: linalg::numerical_rank(&stoch, RANK_RTOL),
        stochastic_required: q(n) + n * (m1 + m2) + q(m1),
        mean_field_rank: linalg::numerical_rank(&mean, RANK_RTOL),
        mean_field_required: q(n) + n * (m1 + m2),
    }
}

fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

fn put_row(target: &mut Mat, row: usize, col: usize, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        target[(row, col + i)] = *v;
    }
}

/// Unknowns of the stochastic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaP {
    pub p: Mat,
    /// `M = (R + Λ)K⁺`, `m1 × n`.
    pub m: Mat,
    /// `γ⁻²GᵀP`, `m2 × n`.
    pub l_next: Mat,
    /// `DᵀPD`.
    pub lambda: Mat,
}

impl ThetaP {
    pub fn dim(layout: MomentLayout) -> usize {
        let MomentLayout { n, m1, m2 } = layout;
        n * (n + 1) / 2 + n * (m1 + m2) + m1 * (m1 + 1) / 2
    }

    pub fn encode(&self) -> Result<Vector> {
        let mut v = Vec::new();
        v.extend(crate::lyap::vecm(&self.p)?.iter());
        v.extend(self.m.iter());
        v.extend(self.l_next.iter());
        v.extend(crate::lyap::vecm(&self.lambda)?.iter());
        Ok(Vector::from_vec(v))
    }

    pub fn decode(theta: &[f64], layout: MomentLayout) -> Result<Self> {
        let MomentLayout { n, m1, m2 } = layout;
        if theta.len() != Self::dim(layout) {
            return Err(Error::Dimension(format!("theta has {} entries, expected {}", theta.len(), Self::dim(layout))));
        }
        let qn = n * (n + 1) / 2;
        let p = linalg::symmetrize(&SymmetricCodec::new(n).decode(&theta[..qn])?);
        let m = Mat::from_column_slice(m1, n, &theta[qn..qn + m1 * n]);
        let o = qn + m1 * n;
        let l_next = Mat::from_column_slice(m2, n, &theta[o..o + m2 * n]);
        let lambda = linalg::symmetrize(&SymmetricCodec::new(m1).decode(&theta[o + m2 * n..])?);
        Ok(Self { p, m, l_next, lambda })
    }

    /// `K = (R + Λ)⁻¹M`.
    pub fn control_gain(&self, r: &Mat) -> Result<Mat> {
        let inv = linalg::spd_inverse(&(r + &self.lambda)).ok_or(Error::InputWeightSingular)?;
        Ok(inv * &self.m)
    }
}

/// Regression matrix and right-hand side of the stochastic step for the
/// policy `(K, L)`.
pub fn assemble_regressors_sare(feats: &IntegralFeatures, k: &Mat, l: &Mat, cost: &CostSpec) -> Result<(Mat, Vector)> {
    let layout = feats.layout;
    let MomentLayout { n, m1, m2 } = layout;
    if k.shape() != (m1, n) || l.shape() != (m2, n) || cost.q.shape() != (n, n) || cost.r.shape() != (m1, m1) {
        return Err(Error::Dimension("gains or weights do not match the data layout".into()));
    }
    let g2 = cost.gamma_sq();
    let weight = linalg::symmetrize(&(&cost.q - l.transpose() * l * g2 + k.transpose() * &cost.r * k));
    let qn = n * (n + 1) / 2;
    let codec_u = SymmetricCodec::new(m1);
    let rows = feats.rows();
    let mut psi = Mat::zeros(rows, ThetaP::dim(layout));
    let mut rhs = Vector::zeros(rows);
    for r in 0..rows {
        let xx = feats.xx(r);
        put_row(&mut psi, r, 0, feats.delta.row(r).transpose().as_slice());
        let m_block = -(feats.ux(r) + k * &xx) * 2.0;
        put_row(&mut psi, r, qn, m_block.as_slice());
        let l_block = (-feats.vx(r) + l * &xx) * (2.0 * g2);
        put_row(&mut psi, r, qn + m1 * n, l_block.as_slice());
        let lam = codec_u.moment_feature(&(k * &xx * k.transpose())) - codec_u.moment_feature(&feats.uu(r));
        put_row(&mut psi, r, qn + (m1 + m2) * n, lam.as_slice());
        rhs[r] = -(&weight * &xx).trace();
    }
    Ok((psi, rhs))
}

/// Least-squares solution of the stochastic step and its improved gain.
pub fn lsq_step_sare(feats: &IntegralFeatures, k: &Mat, l: &Mat, cost: &CostSpec) -> Result<(ThetaP, Mat, f64)> {
    let (psi, rhs) = assemble_regressors_sare(feats, k, l, cost)?;
    let theta = linalg::lstsq(&psi, &rhs, RANK_RTOL)?;
    let residual = (&psi * &theta - &rhs).norm();
    let decoded = ThetaP::decode(theta.as_slice(), feats.layout)?;
    let gain = decoded.control_gain(&cost.r)?;
    Ok((decoded, gain, residual))
}

/// Quantities of the shifted mean-field game taken as known during its
/// regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PiKnowns {
    pub k_p: Mat,
    pub l_p: Mat,
    pub upsilon: Mat,
    pub q_gamma: Mat,
    pub gamma: f64,
}

impl PiKnowns {
    /// From learned stochastic gains, `Λ̂` and the cost.
    pub fn new(gains: &GainPair, lambda: &Mat, cost: &CostSpec) -> Self {
        Self {
            k_p: gains.control.clone(),
            l_p: gains.disturbance.clone(),
            upsilon: linalg::symmetrize(&(&cost.r + lambda)),
            q_gamma: model::q_gamma(&cost.q, &cost.coupling),
            gamma: cost.gamma,
        }
    }
}

/// Unknowns of the mean-field regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPi {
    pub pi: Mat,
    pub k_pi: Mat,
    pub l_pi: Mat,
}

impl ThetaPi {
    pub fn dim(layout: MomentLayout) -> usize {
        let MomentLayout { n, m1, m2 } = layout;
        n * (n + 1) / 2 + n * (m1 + m2)
    }

    pub fn decode(theta: &[f64], layout: MomentLayout) -> Result<Self> {
        let MomentLayout { n, m1, m2 } = layout;
        if theta.len() != Self::dim(layout) {
            return Err(Error::Dimension(format!("theta has {} entries, expected {}", theta.len(), Self::dim(layout))));
        }
        let qn = n * (n + 1) / 2;
        let pi = linalg::symmetrize(&SymmetricCodec::new(n).decode(&theta[..qn])?);
        let k_pi = Mat::from_column_slice(m1, n, &theta[qn..qn + m1 * n]);
        let l_pi = Mat::from_column_slice(m2, n, &theta[qn + m1 * n..]);
        Ok(Self { pi, k_pi, l_pi })
    }
}

/// Regression of the shifted mean-field step for the policy `(K_π, L_π)`.
pub fn assemble_regressors_pi(
    feats: &IntegralFeatures,
    k_pi: &Mat,
    l_pi: &Mat,
    known: &PiKnowns,
) -> Result<(Mat, Vector)> {
    let layout = feats.layout;
    let MomentLayout { n, m1, m2 } = layout;
    if k_pi.shape() != (m1, n) || l_pi.shape() != (m2, n) || known.upsilon.shape() != (m1, m1) {
        return Err(Error::Dimension("gains or weights do not match the data layout".into()));
    }
    let g2 = known.gamma * known.gamma;
    let weight = linalg::symmetrize(
        &(-&known.q_gamma - l_pi.transpose() * l_pi * g2 + k_pi.transpose() * &known.upsilon * k_pi),
    );
    let k_total = &known.k_p + k_pi;
    let l_total = &known.l_p + l_pi;
    let qn = n * (n + 1) / 2;
    let rows = feats.rows();
    let mut psi = Mat::zeros(rows, ThetaPi::dim(layout));
    let mut rhs = Vector::zeros(rows);
    for r in 0..rows {
        let xx = feats.xx(r);
        put_row(&mut psi, r, 0, feats.delta.row(r).transpose().as_slice());
        let k_block = -(&known.upsilon * (feats.ux(r) + &k_total * &xx)) * 2.0;
        put_row(&mut psi, r, qn, k_block.as_slice());
        let l_block = (-feats.vx(r) + &l_total * &xx) * (2.0 * g2);
        put_row(&mut psi, r, qn + m1 * n, l_block.as_slice());
        rhs[r] = -(&weight * &xx).trace();
    }
    Ok((psi, rhs))
}

pub fn lsq_step_are_pi(feats: &IntegralFeatures, k_pi: &Mat, l_pi: &Mat, known: &PiKnowns) -> Result<(ThetaPi, f64)> {
    let (psi, rhs) = assemble_regressors_pi(feats, k_pi, l_pi, known)?;
    let theta = linalg::lstsq(&psi, &rhs, RANK_RTOL)?;
    let residual = (&psi * &theta - &rhs).norm();
    Ok((ThetaPi::decode(theta.as_slice(), feats.layout)?, residual))
}

/// Estimated drift matrices `(A, B, G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedDrift {
    pub a: Mat,
    pub b: Mat,
    pub g: Mat,
}

impl IdentifiedDrift {
    /// Noise-free model with the identified drift.
    pub fn to_model(&self) -> SystemModel {
        let n = self.a.nrows();
        SystemModel::new(
            self.a.clone(),
            self.b.clone(),
            self.g.clone(),
            Mat::zeros(n, n),
            Mat::zeros(n, self.b.ncols()),
        )
    }

    /// Largest relative Frobenius error of the three estimates.
    pub fn relative_error(&self, truth: &SystemModel) -> f64 {
        let rel = |e: &Mat, t: &Mat| {
            let d = t.norm();
            if d == 0.0 {
                e.norm()
            } else {
                (e - t).norm() / d
            }
        };
        rel(&self.a, &truth.a).max(rel(&self.b, &truth.b)).max(rel(&self.g, &truth.g))
    }
}

/// Row-wise least-squares identification of `(A, B, G)` from mean-field
/// features: `d(x̄ⱼ²) = 2x̄ⱼ(Aⱼx̄ + Bⱼū + Gⱼv̄)dt`.
pub fn identify_system_rows(feats: &IntegralFeatures) -> Result<IdentifiedDrift> {
    let MomentLayout { n, m1, m2 } = feats.layout;
    let codec = SymmetricCodec::new(n);
    let rows = feats.rows();
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m1);
    let mut g = Mat::zeros(n, m2);
    for j in 0..n {
        let mut probe = Mat::zeros(n, n);
        probe[(j, j)] = 1.0;
        let selector = codec.encode_upper(&probe);
        let mut phi = Mat::zeros(rows, n + m1 + m2);
        let mut target = Vector::zeros(rows);
        for r in 0..rows {
            let xx = feats.xx(r);
            let ux = feats.ux(r);
            let vx = feats.vx(r);
            for c in 0..n {
                phi[(r, c)] = 2.0 * xx[(j, c)];
            }
            for c in 0..m1 {
                phi[(r, n + c)] = 2.0 * ux[(c, j)];
            }
            for c in 0..m2 {
                phi[(r, n + m1 + c)] = 2.0 * vx[(c, j)];
            }
            target[r] = feats.delta.row(r).dot(&selector.transpose());
        }
        let row = linalg::lstsq(&phi, &target, RANK_RTOL)?;
        for c in 0..n {
            a[(j, c)] = row[c];
        }
        for c in 0..m1 {
            b[(j, c)] = row[n + c];
        }
        for c in 0..m2 {
            g[(j, c)] = row[n + m1 + c];
        }
    }
    Ok(IdentifiedDrift { a, b, g })
}

fn drift_is_hurwitz(model: &SystemModel, k: &Mat, l: &Mat) -> Result<bool> {
    GeneralizedLyapunov::new(model, k, l, true)?.is_ms_stable()
}

/// Data-driven policy step for the stochastic game.
///
/// Admissibility and initial gains use `drift` (typically identified from
/// data) as a noise-free surrogate; without one every gain is accepted and
/// the initializer must be [`InitStrategy::User`].
#[derive(Debug, Clone)]
pub struct SareDataStep<'a> {
    pub features: &'a IntegralFeatures,
    pub cost: CostSpec,
    pub drift: Option<SystemModel>,
    pub init: InitStrategy,
    pub epsilon_lmi: f64,
    /// Decay margin `α` used when the initializer solves an LMI.
    pub decay_margin: f64,
}

/// Default decay margin for initial gains computed on a surrogate drift.
///
/// The surrogate omits the diffusion, so a gain that merely makes it
/// Hurwitz can leave the true stochastic closed loop barely stable (or
/// unstable) and the first regressions badly conditioned. Stabilizing
/// `Â + αI` instead leaves room for the unmodelled noise.
pub const DEFAULT_DECAY_MARGIN: f64 = 0.5;

fn surrogate_initial_gain(
    drift: Option<&SystemModel>,
    layout: MomentLayout,
    l: &Mat,
    init: &InitStrategy,
    epsilon: f64,
    margin: f64,
) -> Result<Mat> {
    match (drift, init) {
        (Some(model), InitStrategy::User(k0)) => {
            stabilizer::initial_gain(model, l, true, &InitStrategy::User(k0.clone()), epsilon)
        }
        (Some(model), strategy) => {
            let mut shifted = model.clone();
            shifted.a += Mat::identity(layout.n, layout.n) * margin;
            stabilizer::initial_gain(&shifted, l, true, strategy, epsilon)
        }
        (None, InitStrategy::User(k0)) if k0.shape() == (layout.m1, layout.n) => Ok(k0.clone()),
        (None, _) => Err(Error::NoStabilizer),
    }
}

impl PolicyStep for SareDataStep<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let l = self.features.layout;
        (l.n, l.m1, l.m2)
    }

    fn initial_gain(&mut self, l: &Mat) -> Result<Mat> {
        surrogate_initial_gain(
            self.drift.as_ref(),
            self.features.layout,
            l,
            &self.init,
            self.epsilon_lmi,
            self.decay_margin,
        )
    }

    fn is_admissible(&self, k: &Mat, l: &Mat) -> Result<bool> {
        match &self.drift {
            Some(model) => drift_is_hurwitz(model, k, l),
            None => Ok(true),
        }
    }

    fn step(&mut self, k: &Mat, l: &Mat) -> Result<StepResult> {
        let (theta, gain, residual) = lsq_step_sare(self.features, k, l, &self.cost)?;
        Ok(StepResult {
            value: theta.p,
            control_gain: gain,
            disturbance_gain: theta.l_next,
            aux: Some(theta.lambda),
            residual,
        })
    }
}

/// Data-driven policy step for the shifted mean-field game.
#[derive(Debug, Clone)]
pub struct PiDataStep<'a> {
    pub features: &'a IntegralFeatures,
    pub known: PiKnowns,
    /// Surrogate drift of the shifted game, `Â - B̂K_p + ĜL_p`.
    pub drift: Option<SystemModel>,
    pub init: InitStrategy,
    pub epsilon_lmi: f64,
    /// Decay margin `α` used when the initializer solves an LMI.
    pub decay_margin: f64,
}

impl PolicyStep for PiDataStep<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let l = self.features.layout;
        (l.n, l.m1, l.m2)
    }

    fn initial_gain(&mut self, l: &Mat) -> Result<Mat> {
        surrogate_initial_gain(
            self.drift.as_ref(),
            self.features.layout,
            l,
            &self.init,
            self.epsilon_lmi,
            self.decay_margin,
        )
    }

    fn is_admissible(&self, k: &Mat, l: &Mat) -> Result<bool> {
        match &self.drift {
            Some(model) => drift_is_hurwitz(model, k, l),
            None => Ok(true),
        }
    }

    fn step(&mut self, k: &Mat, l: &Mat) -> Result<StepResult> {
        let (theta, residual) = lsq_step_are_pi(self.features, k, l, &self.known)?;
        Ok(StepResult { value: theta.pi, control_gain: theta.k_pi, disturbance_gain: theta.l_pi, aux: None, residual })
    }
}

/// Learned dual loop for the stochastic game, from `L⁰ = 0`.
pub fn learn_sare(
    feats: &IntegralFeatures,
    cost: &CostSpec,
    drift: Option<&SystemModel>,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    decay_margin: f64,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    cfg.validate().map_err(|error| LoopFailure { error, trace: IterationTrace::default() })?;
    let mut step = SareDataStep {
        features: feats,
        cost: cost.clone(),
        drift: drift.cloned(),
        init: init.clone(),
        epsilon_lmi: cfg.epsilon_lmi,
        decay_margin,
    };
    let l0 = Mat::zeros(feats.layout.m2, feats.layout.n);
    dualloop::run_dual_loop(&mut step, &l0, cfg.schedule(), cfg.warm_start, &mut NoDisturbance)
}

/// Learned dual loop for the shifted mean-field game, from `L_π = -L̂_p`.
pub fn learn_pi(
    feats: &IntegralFeatures,
    known: &PiKnowns,
    drift: Option<&IdentifiedDrift>,
    cfg: &DualLoopConfig,
    init: &InitStrategy,
    decay_margin: f64,
) -> core::result::Result<(RiccatiSolution, IterationTrace), LoopFailure> {
    cfg.validate().map_err(|error| LoopFailure { error, trace: IterationTrace::default() })?;
    let shifted = drift.map(|d| {
        let mut m = d.to_model();
        m.a = &d.a - &d.b * &known.k_p + &d.g * &known.l_p;
        m
    });
    let mut step = PiDataStep {
        features: feats,
        known: known.clone(),
        drift: shifted,
        init: init.clone(),
        epsilon_lmi: cfg.epsilon_lmi,
        decay_margin,
    };
    let l0 = -known.l_p.clone();
    dualloop::run_dual_loop(&mut step, &l0, cfg.schedule(), cfg.warm_start, &mut NoDisturbance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_series(values: &[f64], dt: f64) -> MomentSeries {
        let mut acc = MomentAccumulator::new(MomentLayout::new(1, 1, 1), dt, values.len());
        for (i, x) in values.iter().enumerate() {
            acc.record(i, &[*x], &[0.0], &[0.0]);
        }
        acc.finish_path();
        acc.finish().unwrap()
    }

    #[test]
    fn scalar_delta_is_difference_of_squares() {
        let xs: Vec<f64> = (0..11).map(|i| 1.0 + 0.1 * i as f64).collect();
        let series = scalar_series(&xs, 0.1);
        let window = DataWindow { t1: 0.0, count: 2, length: 0.5, step: 0.1 };
        let f = integral_features(&series, &window, FeatureSource::Sample).unwrap();
        assert!((f.delta[(0, 0)] - (xs[5] * xs[5] - xs[0] * xs[0])).abs() < 1e-12);
        assert!((f.delta[(1, 0)] - (xs[6] * xs[6] - xs[1] * xs[1])).abs() < 1e-12);
    }

    #[test]
    fn constant_path_integrates_exactly() {
        let series = scalar_series(&[3.0; 21], 0.05);
        let window = DataWindow { t1: 0.0, count: 1, length: 1.0, step: 0.05 };
        let f = integral_features(&series, &window, FeatureSource::Sample).unwrap();
        assert!((f.i_x()[(0, 0)] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn windows_beyond_horizon_are_rejected() {
        let series = scalar_series(&[1.0; 11], 0.1);
        let window = DataWindow { t1: 0.0, count: 3, length: 0.9, step: 0.1 };
        assert!(matches!(integral_features(&series, &window, FeatureSource::Sample), Err(Error::WindowOutOfRange(_))));
    }

    #[test]
    fn covering_counts_paper_windows() {
        let w = DataWindow::covering(0.0, 14.0, 0.1, 0.001).unwrap();
        assert_eq!(w.count, 13901);
    }

    #[test]
    fn theta_dimension_matches_rank_requirement() {
        assert_eq!(ThetaP::dim(MomentLayout::new(2, 1, 1)), 8);
        assert_eq!(ThetaPi::dim(MomentLayout::new(2, 1, 1)), 7);
    }

    #[test]
    fn theta_round_trip() {
        let theta = ThetaP {
            p: Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            m: Mat::from_row_slice(1, 2, &[0.3, -0.2]),
            l_next: Mat::from_row_slice(1, 2, &[0.1, 0.7]),
            lambda: Mat::from_element(1, 1, 0.05),
        };
        let v = theta.encode().unwrap();
        assert_eq!(ThetaP::decode(v.as_slice(), MomentLayout::new(2, 1, 1)).unwrap(), theta);
    }
}
