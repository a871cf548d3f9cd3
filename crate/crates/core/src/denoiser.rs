//! Waypoint-guided compositional denoising under an analytic Gaussian
//! trajectory prior.
//!
//! A horizon of `H` plan steps is cut into `K` overlapping segments. Each
//! segment is denoised under the exact conditional of a quadratic energy
//! (smoothness, dynamics consistency, endpoint anchors and the waypoint
//! energy `γ·E_W`) given its neighbors' current clean estimates. Because every
//! factor is Gaussian, the posterior mean `E[x0 | x_t]` and therefore the score
//! are available in closed form, which lets the sampler be checked against a
//! direct solve of the full-horizon normal equations ([`closed_form_map`]).
//!
//! Per axis, a segment's variables are stored interleaved as
//! `[p_0, v_0, p_1, v_1, ...]`, which keeps every precision matrix banded with
//! half-bandwidth 4.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::{State, Trace};
use crate::error::{Error, Result};
use crate::planners::WaypointPlan;
use crate::seed;

pub const DEFAULT_T_STEPS: usize = 200;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.5;
/// Segment length and overlap in control steps.
pub const DEFAULT_H_TRAIN: usize = 200;
pub const DEFAULT_OVERLAP: usize = 20;
/// Control steps per plan step.
pub const DEFAULT_STRIDE: usize = 4;
/// Anchor strength relative to the larger prior weight.
pub const ANCHOR_RATIO: f64 = 1e3;
/// Overlap coupling relative to `λ_s`. Segments are already coupled
/// through the exact conditional on their neighbors' values; a positive
/// ratio adds a penalty toward the neighbors' overlap estimates, which slows
/// the agreement of the segments.
pub const OVERLAP_RATIO: f64 = 0.0;
/// Overlap disagreement (relative to the trajectory scale) above which a
/// result is flagged.
pub const STITCH_TOLERANCE: f64 = 1e-2;

pub const DEFAULT_SWEEPS: usize = 4;

const BANDWIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear β ramp from `beta_min` to `beta_max` over `t_steps`.
pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<DenoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::invalid("T_steps must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(DenoiseSchedule {
        t_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub h: usize,
    pub h_train: usize,
    pub o: usize,
    pub k: usize,
    /// Half-open `[start, end)` plan-step ranges.
    pub segments: Vec<(usize, usize)>,
}

pub fn make_layout(h: usize, h_train: usize, o: usize) -> Result<SegmentLayout> {
    if h < 2 {
        return Err(Error::invalid(format!("horizon must be at least 2 steps, got {h}")));
    }
    if o == 0 || o >= h_train {
        return Err(Error::InvalidLayout(format!(
            "need 1 <= O < H_train, got O={o}, H_train={h_train}"
        )));
    }
    let stride = h_train - o;
    let k = if h <= h_train {
        1
    } else {
        (h - o).div_ceil(stride).max(1)
    };
    let segments = (0..k)
        .map(|i| {
            let s = i * stride;
            let e = if i + 1 == k { h } else { s + h_train };
            (s, e)
        })
        .collect();
    Ok(SegmentLayout {
        h,
        h_train,
        o,
        k,
        segments,
    })
}

impl SegmentLayout {
    /// Indices shared by segments `k` and `k + 1`.
    pub fn overlap(&self, k: usize) -> (usize, usize) {
        (self.segments[k + 1].0, self.segments[k].1)
    }
}

pub fn triangular_weight(t: f64, t_hat: f64, r: f64) -> f64 {
    (1.0 - (t - t_hat).abs() / r).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPrior {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub dt_plan: f64,
    /// Endpoint anchor strength.
    pub kappa: f64,
    pub mu_overlap: f64,
}

impl LocalPrior {
    pub fn new(lambda_s: f64, lambda_d: f64, dt_plan: f64) -> Result<Self> {
        if !(lambda_s > 0.0 && lambda_d > 0.0 && dt_plan > 0.0)
            || !(lambda_s.is_finite() && lambda_d.is_finite() && dt_plan.is_finite())
        {
            return Err(Error::invalid(format!(
                "prior weights and dt_plan must be positive, got {lambda_s}, {lambda_d}, {dt_plan}"
            )));
        }
        Ok(LocalPrior {
            lambda_s,
            lambda_d,
            dt_plan,
            kappa: ANCHOR_RATIO * lambda_s.max(lambda_d),
            mu_overlap: OVERLAP_RATIO * lambda_s,
        })
    }

    /// Moment matching: each weight is `1 / (2σ²)` for the variance of the
    /// residual it penalizes, measured on the dataset subsampled by `stride`.
    pub fn fit(ds: &Dataset, stride: usize) -> Result<Self> {
        let stats = ds.difference_stats(stride);
        if stats.samples == 0 {
            return Err(Error::invalid("dataset too short to fit the prior"));
        }
        let floor = 1e-12;
        let p = LocalPrior::new(
            0.5 / stats.position_second_diff_var.max(floor),
            0.5 / stats.dynamics_residual_var.max(floor),
            ds.dt * stride.max(1) as f64,
        )?;
        log::info!(
            "prior fit: lambda_s={:.4} lambda_d={:.4} dt_plan={} ({} samples)",
            p.lambda_s,
            p.lambda_d,
            p.dt_plan,
            stats.samples
        );
        Ok(p)
    }

    /// The prior quadratic form (no anchors) of a state sequence.
    pub fn energy(&self, states: &[State]) -> f64 {
        let h = self.dt_plan;
        let mut e = 0.0;
        for w in states.windows(3) {
            for i in 0..w[0].dim() {
                let a = w[2].position[i] - 2.0 * w[1].position[i] + w[0].position[i];
                let b = w[2].velocity[i] - 2.0 * w[1].velocity[i] + w[0].velocity[i];
                e += self.lambda_s * a * a + self.lambda_d * b * b;
            }
        }
        for w in states.windows(2) {
            for i in 0..w[0].dim() {
                let r = w[1].position[i] - w[0].position[i] - h * w[0].velocity[i];
                e += self.lambda_d * r * r;
            }
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldWaypoint {
    /// Center time index `round(t̂_m / dt_plan)`.
    pub center: f64,
    pub target: State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceField {
    pub horizon: usize,
    pub radius: f64,
    pub gamma: f64,
    /// Measure waypoint deviation on positions only.
    #[serde(default)]
    pub position_only: bool,
    pub waypoints: Vec<FieldWaypoint>,
}

impl GuidanceField {
    pub fn new(
        horizon: usize,
        radius: f64,
        gamma: f64,
        position_only: bool,
        waypoints: Vec<FieldWaypoint>,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("guidance window radius must be positive"));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        if let Some(d) = waypoints.first().map(|w| w.target.dim()) {
            if let Some(w) = waypoints.iter().find(|w| w.target.dim() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: w.target.dim(),
                });
            }
        }
        Ok(GuidanceField {
            horizon,
            radius,
            gamma,
            position_only,
            waypoints,
        })
    }

    /// No waypoints; only the prior and anchors shape the trajectory.
    pub fn empty(horizon: usize) -> Self {
        GuidanceField {
            horizon,
            radius: 1.0,
            gamma: 0.0,
            position_only: false,
            waypoints: Vec::new(),
        }
    }

    /// Field over `horizon_hint + 1` states with centers at the waypoint
    /// times in plan steps (clamped to the horizon).
    pub fn from_plan(plan: &WaypointPlan, radius: f64, gamma: f64, position_only: bool) -> Result<Self> {
        let horizon = (plan.horizon_hint + 1).max(2);
        let last = (horizon - 1) as f64;
        let waypoints = plan
            .waypoints
            .iter()
            .map(|w| FieldWaypoint {
                center: (w.t / plan.dt_plan).round().clamp(0.0, last),
                target: w.state.clone(),
            })
            .collect();
        GuidanceField::new(horizon, radius, gamma, position_only, waypoints)
    }

    pub fn weight(&self, m: usize, t: usize) -> f64 {
        triangular_weight(t as f64, self.waypoints[m].center, self.radius)
    }

    fn check(&self, traj: &[State]) -> Result<()> {
        if traj.len() != self.horizon {
            return Err(Error::invalid(format!(
                "trajectory has {} states, field horizon is {}",
                traj.len(),
                self.horizon
            )));
        }
        Ok(())
    }

    /// Combined per-step guidance `(W_t, w̄_t)` with `W_t = γ Σ_m λ_m(t)` and
    /// `w̄_t` the λ-weighted waypoint mean; `None` where no window reaches.
    fn combined(&self) -> Vec<Option<(f64, State)>> {
        (0..self.horizon)
            .map(|t| {
                let mut wsum = 0.0;
                let mut acc: Option<State> = None;
                for (m, wp) in self.waypoints.iter().enumerate() {
                    let l = self.weight(m, t);
                    if l <= 0.0 {
                        continue;
                    }
                    wsum += l;
                    let a = acc.get_or_insert_with(|| State {
                        position: vec![0.0; wp.target.dim()],
                        velocity: vec![0.0; wp.target.dim()],
                    });
                    for i in 0..wp.target.dim() {
                        a.position[i] += l * wp.target.position[i];
                        a.velocity[i] += l * wp.target.velocity[i];
                    }
                }
                let mut mean = acc?;
                if self.gamma <= 0.0 {
                    return None;
                }
                mean.position.iter_mut().for_each(|x| *x /= wsum);
                mean.velocity.iter_mut().for_each(|x| *x /= wsum);
                Some((self.gamma * wsum, mean))
            })
            .collect()
    }
}

fn sq_dev(s: &State, w: &State, position_only: bool) -> f64 {
    let p: f64 = s.position.iter().zip(&w.position).map(|(a, b)| (a - b) * (a - b)).sum();
    if position_only {
        p
    } else {
        p + s.velocity.iter().zip(&w.velocity).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }
}

/// `E_W(τ) = Σ_m Σ_t λ_m(t) ‖s_t − w_m‖²` (without the scale γ).
pub fn waypoint_energy(traj: &[State], field: &GuidanceField) -> Result<f64> {
    field.check(traj)?;
    let mut e = 0.0;
    for (m, wp) in field.waypoints.iter().enumerate() {
        for (t, s) in traj.iter().enumerate() {
            let l = field.weight(m, t);
            if l > 0.0 {
                e += l * sq_dev(s, &wp.target, field.position_only);
            }
        }
    }
    Ok(e)
}

/// `∂E_W/∂s_t = Σ_m 2 λ_m(t) (s_t − w_m)`.
pub fn energy_gradient(traj: &[State], field: &GuidanceField) -> Result<Vec<State>> {
    field.check(traj)?;
    let mut g: Vec<State> = traj
        .iter()
        .map(|s| State {
            position: vec![0.0; s.dim()],
            velocity: vec![0.0; s.dim()],
        })
        .collect();
    for (m, wp) in field.waypoints.iter().enumerate() {
        for (t, s) in traj.iter().enumerate() {
            let l = field.weight(m, t);
            if l <= 0.0 {
                continue;
            }
            for i in 0..s.dim() {
                g[t].position[i] += 2.0 * l * (s.position[i] - wp.target.position[i]);
                if !field.position_only {
                    g[t].velocity[i] += 2.0 * l * (s.velocity[i] - wp.target.velocity[i]);
                }
            }
        }
    }
    Ok(g)
}

/// One quadratic residual `w (Σ c_j x_j − target)²` over interleaved
/// per-axis variables.
#[derive(Debug, Clone)]
struct Term {
    w: f64,
    target: f64,
    coef: Vec<(usize, f64)>,
}

fn pv(t: usize) -> (usize, usize) {
    (2 * t, 2 * t + 1)
}

/// Prior terms over plan steps `[0, n)` (local indices).
fn prior_terms(prior: &LocalPrior, n: usize) -> Vec<Term> {
    let mut out = Vec::new();
    for t in 0..n.saturating_sub(2) {
        let (p0, v0) = pv(t);
        let (p1, v1) = pv(t + 1);
        let (p2, v2) = pv(t + 2);
        out.push(Term {
            w: prior.lambda_s,
            target: 0.0,
            coef: vec![(p0, 1.0), (p1, -2.0), (p2, 1.0)],
        });
        out.push(Term {
            w: prior.lambda_d,
            target: 0.0,
            coef: vec![(v0, 1.0), (v1, -2.0), (v2, 1.0)],
        });
    }
    for t in 0..n.saturating_sub(1) {
        let (p0, v0) = pv(t);
        let (p1, _) = pv(t + 1);
        out.push(Term {
            w: prior.lambda_d,
            target: 0.0,
            coef: vec![(p0, -1.0), (v0, -prior.dt_plan), (p1, 1.0)],
        });
    }
    out
}

fn state_terms(t: usize, w: f64, s: &State, axis: usize, position_only: bool) -> Vec<Term> {
    let (p, v) = pv(t);
    let mut out = vec![Term {
        w,
        target: s.position[axis],
        coef: vec![(p, 1.0)],
    }];
    if !position_only {
        out.push(Term {
            w,
            target: s.velocity[axis],
            coef: vec![(v, 1.0)],
        });
    }
    out
}

/// Symmetric banded matrix stored as `band[i][k] = A[i][i − k]`.
#[derive(Debug, Clone)]
struct Banded {
    n: usize,
    band: Vec<[f64; BANDWIDTH + 1]>,
}

impl Banded {
    fn zeros(n: usize) -> Self {
        Banded {
            n,
            band: vec![[0.0; BANDWIDTH + 1]; n],
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= BANDWIDTH);
        self.band[i][i - j] += v;
    }

    fn add_term(&mut self, w: f64, coef: &[(usize, f64)]) {
        for &(i, a) in coef {
            for &(j, b) in coef {
                if i >= j {
                    self.add(i, j, 2.0 * w * a * b);
                }
            }
        }
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] += self.band[i][0] * x[i];
            for k in 1..=BANDWIDTH.min(i) {
                let a = self.band[i][k];
                y[i] += a * x[i - k];
                y[i - k] += a * x[i];
            }
        }
        y
    }

    /// Cholesky factor `L` in the same band layout.
    fn cholesky(&self, shift: f64) -> Result<Banded> {
        let mut l = Banded::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(BANDWIDTH);
            for j in lo..=i {
                let mut s = self.band[i][i - j] + if i == j { shift } else { 0.0 };
                for m in lo.max(j.saturating_sub(BANDWIDTH))..j {
                    s -= l.band[i][i - m] * l.band[j][j - m];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "precision matrix not positive definite at row {i}"
                        )));
                    }
                    l.band[i][0] = s.sqrt();
                } else {
                    l.band[i][i - j] = s / l.band[j][0];
                }
            }
        }
        Ok(l)
    }

    /// Solves `L Lᵀ x = b` given the factor.
    fn chol_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 1..=BANDWIDTH.min(i) {
                y[i] -= self.band[i][k] * y[i - k];
            }
            y[i] /= self.band[i][0];
        }
        for i in (0..n).rev() {
            for k in 1..=BANDWIDTH.min(n - 1 - i) {
                y[i] -= self.band[i + k][k] * y[i + k];
            }
            y[i] /= self.band[i][0];
        }
        y
    }
}

fn flatten_axis(states: &[State], axis: usize) -> Vec<f64> {
    states
        .iter()
        .flat_map(|s| [s.position[axis], s.velocity[axis]])
        .collect()
}

fn unflatten(axes: &[Vec<f64>]) -> Vec<State> {
    let n = axes.first().map(|a| a.len() / 2).unwrap_or(0);
    (0..n)
        .map(|t| State {
            position: axes.iter().map(|a| a[2 * t]).collect(),
            velocity: axes.iter().map(|a| a[2 * t + 1]).collect(),
        })
        .collect()
}

/// Posterior mean `E[x0 | x_t]` of a Gaussian with precision `A` and linear
/// term `b` under `x_t = √ᾱ x0 + √(1−ᾱ) ε`.
fn posterior_mean(a: &Banded, b: &[f64], x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if alpha_bar >= 1.0 {
        return Err(Error::invalid("posterior undefined at zero noise"));
    }
    let l = a.cholesky(alpha_bar / (1.0 - alpha_bar))?;
    Ok(posterior_from_factor(&l, b, x, alpha_bar))
}

fn posterior_from_factor(l: &Banded, b: &[f64], x: &[f64], alpha_bar: f64) -> Vec<f64> {
    let cp = alpha_bar.sqrt() / (1.0 - alpha_bar);
    let rhs: Vec<f64> = b.iter().zip(x).map(|(b, x)| b + cp * x).collect();
    l.chol_solve(&rhs)
}

/// Gaussian score at noise level ᾱ; at ᾱ = 1 it is `−(A x − b)`.
fn gaussian_score(a: &Banded, b: &[f64], x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if alpha_bar >= 1.0 {
        let ax = a.mul(x);
        return Ok(ax.iter().zip(b).map(|(ax, b)| b - ax).collect());
    }
    let m = posterior_mean(a, b, x, alpha_bar)?;
    let s = alpha_bar.sqrt();
    Ok(m.iter()
        .zip(x)
        .map(|(m, x)| (s * m - x) / (1.0 - alpha_bar))
        .collect())
}

/// Optional endpoint anchors for a standalone segment.
#[derive(Debug, Clone, Default)]
pub struct Anchors<'a> {
    pub start: Option<&'a State>,
    pub goal: Option<&'a State>,
}

/// Exact score of the segment Gaussian: prior form, anchors on the first and
/// last state (strength `κ`), and coupling toward `overlap` targets given as
/// `(local index, state)` pairs (strength `μ_overlap`).
pub fn local_prior_score(
    segment: &[State],
    alpha_bar: f64,
    prior: &LocalPrior,
    anchors: &Anchors,
    overlap: &[(usize, State)],
) -> Result<Vec<State>> {
    let n = segment.len();
    if n == 0 {
        return Err(Error::invalid("empty segment"));
    }
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::invalid(format!("noise level must be in (0, 1], got {alpha_bar}")));
    }
    let d = segment[0].dim();
    let mut axes = Vec::with_capacity(d);
    for axis in 0..d {
        let mut terms = prior_terms(prior, n);
        if let Some(s) = anchors.start {
            terms.extend(state_terms(0, prior.kappa, s, axis, false));
        }
        if let Some(g) = anchors.goal {
            terms.extend(state_terms(n - 1, prior.kappa, g, axis, false));
        }
        for (t, s) in overlap {
            if *t >= n {
                return Err(Error::invalid(format!("overlap index {t} outside segment of {n}")));
            }
            terms.extend(state_terms(*t, prior.mu_overlap, s, axis, false));
        }
        let mut a = Banded::zeros(2 * n);
        let mut b = vec![0.0; 2 * n];
        for term in &terms {
            a.add_term(term.w, &term.coef);
            for &(j, c) in &term.coef {
                b[j] += 2.0 * term.w * term.target * c;
            }
        }
        axes.push(gaussian_score(&a, &b, &flatten_axis(segment, axis), alpha_bar)?);
    }
    Ok(unflatten(&axes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

impl SampleMode {
    pub fn label(self) -> &'static str {
        match self {
            SampleMode::Stochastic => "stochastic",
            SampleMode::Deterministic => "deterministic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConstants {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub kappa: f64,
    pub mu_overlap: f64,
    pub dt_plan: f64,
    pub gamma: f64,
    pub radius: f64,
    pub position_only: bool,
    pub h: usize,
    pub h_train: usize,
    pub o: usize,
    pub k: usize,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(rename = "E_W_final")]
    pub e_w_final: f64,
    pub overlap_disagreement: f64,
    pub steps: usize,
    pub mode: SampleMode,
    pub seed: u64,
    pub constants: DenoiseConstants,
    /// Overlap disagreement exceeded the stitching tolerance.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedTrajectory {
    pub states: Vec<State>,
    /// `(segment, weight)` contributions per step.
    pub provenance: Vec<Vec<(usize, f64)>>,
    pub diagnostics: Diagnostics,
}

impl GuidedTrajectory {
    pub fn diagnostics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.diagnostics)?)
    }

    /// States as a trace CSV without actions, one row per plan step.
    pub fn to_csv(&self) -> String {
        Trace {
            states: self.states.clone(),
            actions: Vec::new(),
            dt: self.diagnostics.constants.dt_plan,
            events: Vec::new(),
        }
        .to_csv()
    }

    /// Control-rate reference with `stride` states per plan step.
    pub fn control_reference(&self, stride: usize) -> Vec<State> {
        upsample(&self.states, stride, self.diagnostics.constants.dt_plan)
    }
}

/// Cubic Hermite interpolation of positions (velocities are the matching
/// derivative), `stride` samples per interval, ending at the last state.
pub fn upsample(states: &[State], stride: usize, dt_plan: f64) -> Vec<State> {
    let stride = stride.max(1);
    let mut out = Vec::with_capacity(states.len().saturating_sub(1) * stride + 1);
    for w in states.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        for j in 0..stride {
            let u = j as f64 / stride as f64;
            let (u2, u3) = (u * u, u * u * u);
            let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
            let h10 = u3 - 2.0 * u2 + u;
            let h01 = -2.0 * u3 + 3.0 * u2;
            let h11 = u3 - u2;
            let d00 = 6.0 * u2 - 6.0 * u;
            let d10 = 3.0 * u2 - 4.0 * u + 1.0;
            let d01 = -6.0 * u2 + 6.0 * u;
            let d11 = 3.0 * u2 - 2.0 * u;
            let d = a.dim();
            let mut p = vec![0.0; d];
            let mut v = vec![0.0; d];
            for i in 0..d {
                let (p0, p1) = (a.position[i], b.position[i]);
                let (m0, m1) = (a.velocity[i] * dt_plan, b.velocity[i] * dt_plan);
                p[i] = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1;
                v[i] = (d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1) / dt_plan;
            }
            out.push(State {
                position: p,
                velocity: v,
            });
        }
    }
    if let Some(last) = states.last() {
        out.push(last.clone());
    }
    out
}

/// Per-segment, per-axis conditional system. Terms reaching outside the
/// segment keep their outside coefficients, which are evaluated against the
/// neighbors' current estimates.
struct SegmentSystem {
    start: usize,
    end: usize,
    /// Per axis: static precision and terms touching the segment.
    axes: Vec<(Banded, Vec<Term>)>,
    /// Indices shared with the left / right neighbor.
    left: Option<(usize, usize)>,
    right: Option<(usize, usize)>,
}

fn global_terms(
    prior: &LocalPrior,
    field: &GuidanceField,
    combined: &[Option<(f64, State)>],
    start: &State,
    goal: &State,
    axis: usize,
) -> Vec<Term> {
    let h = field.horizon;
    let mut terms = prior_terms(prior, h);
    terms.extend(state_terms(0, prior.kappa, start, axis, false));
    terms.extend(state_terms(h - 1, prior.kappa, goal, axis, false));
    for (t, c) in combined.iter().enumerate() {
        if let Some((w, mean)) = c {
            terms.extend(state_terms(t, *w, mean, axis, field.position_only));
        }
    }
    terms
}

impl SegmentSystem {
    fn new(layout: &SegmentLayout, k: usize, per_axis: &[Vec<Term>], mu: f64) -> Self {
        let (s, e) = layout.segments[k];
        let (lo, hi) = (2 * s, 2 * e);
        let left = (k > 0).then(|| layout.overlap(k - 1));
        let right = (k + 1 < layout.k).then(|| layout.overlap(k));
        let axes = per_axis
            .iter()
            .map(|terms| {
                let touching: Vec<Term> = terms
                    .iter()
                    .filter(|t| t.coef.iter().any(|&(j, _)| j >= lo && j < hi))
                    .cloned()
                    .collect();
                let mut a = Banded::zeros(hi - lo);
                for t in &touching {
                    let local: Vec<(usize, f64)> = t
                        .coef
                        .iter()
                        .filter(|&&(j, _)| j >= lo && j < hi)
                        .map(|&(j, c)| (j - lo, c))
                        .collect();
                    a.add_term(t.w, &local);
                }
                for (a0, a1) in left.iter().chain(right.iter()) {
                    for j in 2 * a0..2 * a1 {
                        a.add(j - lo, j - lo, 2.0 * mu);
                    }
                }
                (a, touching)
            })
            .collect();
        SegmentSystem {
            start: s,
            end: e,
            axes,
            left,
            right,
        }
    }

    /// Linear term for one axis. `context` holds outside values (global
    /// indexing); `left` / `right` are the direct neighbors' clean estimates.
    fn rhs(
        &self,
        axis: usize,
        context: &[f64],
        left: Option<&[f64]>,
        right: Option<&[f64]>,
        mu: f64,
    ) -> Vec<f64> {
        let (lo, hi) = (2 * self.start, 2 * self.end);
        let outside = |j: usize| context[j];
        let (_, terms) = &self.axes[axis];
        let mut b = vec![0.0; hi - lo];
        for t in terms {
            let ext: f64 = t
                .coef
                .iter()
                .filter(|&&(j, _)| j < lo || j >= hi)
                .map(|&(j, c)| c * outside(j))
                .sum();
            for &(j, c) in &t.coef {
                if j >= lo && j < hi {
                    b[j - lo] += 2.0 * t.w * (t.target - ext) * c;
                }
            }
        }
        if let (Some((a0, a1)), Some(v)) = (self.left, left) {
            for j in 2 * a0..2 * a1 {
                b[j - lo] += 2.0 * mu * v[j];
            }
        }
        if let (Some((a0, a1)), Some(v)) = (self.right, right) {
            for j in 2 * a0..2 * a1 {
                b[j - lo] += 2.0 * mu * v[j];
            }
        }
        b
    }
}

/// Values outside segment `k`, each taken from the nearest other segment
/// that covers the index.
fn outside_context(systems: &[SegmentSystem], xhat: &[Vec<Vec<f64>>], k: usize, axis: usize) -> Vec<f64> {
    let mut ctx = vec![0.0; xhat[k][axis].len()];
    let mut order: Vec<usize> = (0..systems.len()).filter(|&j| j != k).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(j.abs_diff(k)));
    for j in order {
        let (s, e) = (systems[j].start, systems[j].end);
        ctx[2 * s..2 * e].copy_from_slice(&xhat[j][axis][2 * s..2 * e]);
    }
    ctx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Synchronous neighbor-estimate passes per denoising step.
    pub sweeps: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { sweeps: DEFAULT_SWEEPS }
    }
}

/// Compositional guided sampling with default [`SamplerOptions`]; see the
/// module docs.
pub fn guided_denoise(
    layout: &SegmentLayout,
    prior: &LocalPrior,
    field: &GuidanceField,
    schedule: &DenoiseSchedule,
    endpoints: (&State, &State),
    mode: SampleMode,
    seed: u64,
) -> Result<GuidedTrajectory> {
    guided_denoise_with(layout, prior, field, schedule, endpoints, mode, seed, SamplerOptions::default())
}

#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn guided_denoise_with(
    layout: &SegmentLayout,
    prior: &LocalPrior,
    field: &GuidanceField,
    schedule: &DenoiseSchedule,
    endpoints: (&State, &State),
    mode: SampleMode,
    seed: u64,
    options: SamplerOptions,
) -> Result<GuidedTrajectory> {
    let (start, goal) = endpoints;
    if layout.h < 2 {
        return Err(Error::invalid("horizon must be at least 2 steps"));
    }
    if field.horizon != layout.h {
        return Err(Error::invalid(format!(
            "field horizon {} does not match layout horizon {}",
            field.horizon, layout.h
        )));
    }
    if !start.is_finite() || !goal.is_finite() {
        return Err(Error::invalid("endpoints must be finite"));
    }
    let d = start.dim();
    if goal.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: goal.dim(),
        });
    }
    if let Some(w) = field.waypoints.iter().find(|w| w.target.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: w.target.dim(),
        });
    }
    let combined = field.combined();
    let per_axis: Vec<Vec<Term>> = (0..d)
        .map(|axis| global_terms(prior, field, &combined, start, goal, axis))
        .collect();
    let mu = prior.mu_overlap;
    let systems: Vec<SegmentSystem> = (0..layout.k)
        .map(|k| SegmentSystem::new(layout, k, &per_axis, mu))
        .collect();
    let h2 = 2 * layout.h;

    // Segment states x[k][axis] (local), clean estimates xhat[k][axis] (global
    // indexing, zero outside the segment).
    let mut x: Vec<Vec<Vec<f64>>> = systems
        .iter()
        .enumerate()
        .map(|(k, sys)| {
            let n = 2 * (sys.end - sys.start);
            match mode {
                SampleMode::Deterministic => vec![vec![0.0; n]; d],
                SampleMode::Stochastic => {
                    let mut rng = seed::rng(seed, "denoise", k as u64);
                    (0..d)
                        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                        .collect()
                }
            }
        })
        .collect();
    let mut rngs: Vec<seed::Rng> = (0..layout.k)
        .map(|k| seed::rng(seed, "denoise-step", k as u64))
        .collect();
    let mut xhat: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; h2]; d]; layout.k];

    for i in (0..schedule.t_steps).rev() {
        let ab = schedule.alpha_bars[i];
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bars[i - 1] };
        let beta = schedule.betas[i];
        let diverged = |e: Error| match e {
            Error::Numerical(_) => Error::Divergence { step: i + 1 },
            other => other,
        };
        let factors: Vec<Vec<Banded>> = systems
            .par_iter()
            .map(|sys| {
                sys.axes
                    .iter()
                    .map(|(a, _)| a.cholesky(ab / (1.0 - ab)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
            .map_err(diverged)?;
        // Synchronous refinement of the clean estimates: every segment sees
        // its neighbors' estimates from the previous pass.
        for _ in 0..options.sweeps.max(1) {
            xhat = systems
                .par_iter()
                .enumerate()
                .map(|(k, sys)| {
                    (0..d)
                        .map(|axis| {
                            let left = (k > 0).then(|| xhat[k - 1][axis].as_slice());
                            let right = (k + 1 < layout.k).then(|| xhat[k + 1][axis].as_slice());
                            let context = outside_context(&systems, &xhat, k, axis);
                            let b = sys.rhs(axis, &context, left, right, mu);
                            let x0 = posterior_from_factor(&factors[k][axis], &b, &x[k][axis], ab);
                            let mut hat = vec![0.0; h2];
                            hat[2 * sys.start..2 * sys.end].copy_from_slice(&x0);
                            hat
                        })
                        .collect()
                })
                .collect();
            if xhat.iter().flatten().any(|v| v.iter().any(|z| !z.is_finite())) {
                return Err(Error::Divergence { step: i + 1 });
            }
        }
        x = systems
            .par_iter()
            .zip(x.par_iter())
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(k, ((sys, xk), rng))| {
                (0..d)
                    .map(|axis| {
                        let x0 = &xhat[k][axis][2 * sys.start..2 * sys.end];
                        let xa = &xk[axis];
                        match mode {
                            SampleMode::Deterministic => {
                                let (sa, sp) = (ab.sqrt(), ab_prev.sqrt());
                                let (na, np) = ((1.0 - ab).sqrt(), (1.0 - ab_prev).sqrt());
                                x0.iter()
                                    .zip(xa)
                                    .map(|(m, x)| sp * m + np * (x - sa * m) / na)
                                    .collect()
                            }
                            SampleMode::Stochastic => {
                                let alpha = 1.0 - beta;
                                let c1 = ab_prev.sqrt() * beta / (1.0 - ab);
                                let c2 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                                let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
                                x0.iter()
                                    .zip(xa)
                                    .map(|(m, x)| {
                                        let z: f64 = if i > 0 { StandardNormal.sample(&mut *rng) } else { 0.0 };
                                        c1 * m + c2 * x + sigma * z
                                    })
                                    .collect()
                            }
                        }
                    })
                    .collect::<Vec<Vec<f64>>>()
            })
            .collect();
        if x.iter().flatten().any(|v| v.iter().any(|z| !z.is_finite())) {
            return Err(Error::Divergence { step: i + 1 });
        }
    }

    // Disagreement on shared indices, then cross-fade.
    let mut disagreement: f64 = 0.0;
    for k in 0..layout.k.saturating_sub(1) {
        let (a0, a1) = layout.overlap(k);
        let (s0, s1) = (systems[k].start, systems[k + 1].start);
        for axis in 0..d {
            for j in 2 * a0..2 * a1 {
                let u = x[k][axis][j - 2 * s0];
                let v = x[k + 1][axis][j - 2 * s1];
                disagreement = disagreement.max((u - v).abs());
            }
        }
    }
    let mut acc = vec![vec![0.0; h2]; d];
    let mut provenance: Vec<Vec<(usize, f64)>> = vec![Vec::new(); layout.h];
    for (k, sys) in systems.iter().enumerate() {
        for t in sys.start..sys.end {
            let mut w = 1.0;
            if let Some((a0, _)) = sys.left {
                if t < layout.segments[k - 1].1 {
                    w = (t - a0 + 1) as f64 / (layout.o + 1) as f64;
                }
            }
            if let Some((a0, _)) = sys.right {
                if t >= a0 {
                    w = 1.0 - (t - a0 + 1) as f64 / (layout.o + 1) as f64;
                }
            }
            provenance[t].push((k, w));
            for axis in 0..d {
                for j in [2 * t, 2 * t + 1] {
                    acc[axis][j] += w * x[k][axis][j - 2 * sys.start];
                }
            }
        }
    }
    let states = unflatten(&acc);
    let scale = states
        .iter()
        .flat_map(|s| s.position.iter().chain(&s.velocity))
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let e_w_final = waypoint_energy(&states, field)?;
    let constants = DenoiseConstants {
        lambda_s: prior.lambda_s,
        lambda_d: prior.lambda_d,
        kappa: prior.kappa,
        mu_overlap: prior.mu_overlap,
        dt_plan: prior.dt_plan,
        gamma: field.gamma,
        radius: field.radius,
        position_only: field.position_only,
        h: layout.h,
        h_train: layout.h_train,
        o: layout.o,
        k: layout.k,
        t_steps: schedule.t_steps,
        beta_min: schedule.betas[0],
        beta_max: *schedule.betas.last().unwrap(),
        sweeps: options.sweeps.max(1),
    };
    let flagged = disagreement > STITCH_TOLERANCE * scale;
    if flagged {
        log::warn!("overlap disagreement {disagreement:.3e} exceeds stitching tolerance");
    }
    Ok(GuidedTrajectory {
        states,
        provenance,
        diagnostics: Diagnostics {
            e_w_final,
            overlap_disagreement: disagreement,
            steps: schedule.t_steps,
            mode,
            seed,
            constants,
            flagged,
        },
    })
}

/// Exact minimizer of prior + anchors + γ·E_W over the full horizon, by a
/// dense solve of the normal equations. Variables are ordered
/// `(t, position|velocity, axis)`.
pub fn closed_form_map(
    prior: &LocalPrior,
    field: &GuidanceField,
    endpoints: (&State, &State),
    h: usize,
) -> Result<Vec<State>> {
    let (start, goal) = endpoints;
    if h < 2 {
        return Err(Error::invalid("horizon must be at least 2 steps"));
    }
    if field.horizon != h {
        return Err(Error::invalid(format!("field horizon {} differs from {h}", field.horizon)));
    }
    let d = start.dim();
    let n = 2 * h * d;
    let p = |t: usize, i: usize| (2 * t) * d + i;
    let v = |t: usize, i: usize| (2 * t + 1) * d + i;
    // Residual rows r(x) = √w (cᵀx − y).
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut push = |w: f64, c: Vec<(usize, f64)>, y: f64| {
        let s = w.sqrt();
        rows.push((c.into_iter().map(|(j, a)| (j, s * a)).collect(), s * y));
    };
    for i in 0..d {
        for t in 0..h - 2 {
            push(prior.lambda_s, vec![(p(t, i), 1.0), (p(t + 1, i), -2.0), (p(t + 2, i), 1.0)], 0.0);
            push(prior.lambda_d, vec![(v(t, i), 1.0), (v(t + 1, i), -2.0), (v(t + 2, i), 1.0)], 0.0);
        }
        for t in 0..h - 1 {
            push(
                prior.lambda_d,
                vec![(p(t + 1, i), 1.0), (p(t, i), -1.0), (v(t, i), -prior.dt_plan)],
                0.0,
            );
        }
        push(prior.kappa, vec![(p(0, i), 1.0)], start.position[i]);
        push(prior.kappa, vec![(v(0, i), 1.0)], start.velocity[i]);
        push(prior.kappa, vec![(p(h - 1, i), 1.0)], goal.position[i]);
        push(prior.kappa, vec![(v(h - 1, i), 1.0)], goal.velocity[i]);
        if field.gamma > 0.0 {
            for (m, wp) in field.waypoints.iter().enumerate() {
                for t in 0..h {
                    let l = field.weight(m, t);
                    if l > 0.0 {
                        push(field.gamma * l, vec![(p(t, i), 1.0)], wp.target.position[i]);
                        if !field.position_only {
                            push(field.gamma * l, vec![(v(t, i), 1.0)], wp.target.velocity[i]);
                        }
                    }
                }
            }
        }
    }
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut atb = DVector::<f64>::zeros(n);
    for (c, y) in &rows {
        for &(j, a) in c {
            atb[j] += a * y;
            for &(k, b) in c {
                ata[(j, k)] += a * b;
            }
        }
    }
    let chol = ata
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations not positive definite".into()))?;
    let sol = chol.solve(&atb);
    let resid = (&ata * &sol - &atb).norm() / atb.norm().max(1e-300);
    if !(resid <= 1e-9) {
        return Err(Error::Numerical(format!("normal-equation residual {resid:.3e}")));
    }
    Ok((0..h)
        .map(|t| State {
            position: (0..d).map(|i| sol[p(t, i)]).collect(),
            velocity: (0..d).map(|i| sol[v(t, i)]).collect(),
        })
        .collect())
}

/// Relative L2 distance between two state sequences.
pub fn relative_l2(a: &[State], b: &[State]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.position.iter().chain(&x.velocity).zip(y.position.iter().chain(&y.velocity)) {
            num += (u - v) * (u - v);
            den += v * v;
        }
    }
    (num / den.max(1e-300)).sqrt()
}
