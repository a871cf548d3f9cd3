//! Offline datasets of short demonstrations.
//!
//! Two generators mirror the usual offline regimes: `stitch` (point-to-point
//! motions planned on a lattice and tracked under the dynamics) and
//! `explore` (random walks toward short-range targets).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    check_segment_collision, track_rollout, Aabb, Action, Dynamics, PdGains, State, World,
    WorldKind, DEFAULT_COLLISION_SAMPLES,
};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const DEFAULT_H_TRAIN: usize = 200;
pub const FORMAT_TAG: &str = "xplan-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Stitch,
    Explore,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub dt: f64,
    pub source: Source,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Accelerations implied by consecutive velocities.
    pub fn reconstruct_actions(&self) -> Vec<Action> {
        self.states
            .windows(2)
            .map(|w| {
                Action::new(
                    w[0].velocity
                        .iter()
                        .zip(&w[1].velocity)
                        .map(|(a, b)| (b - a) / self.dt)
                        .collect(),
                )
            })
            .collect()
    }

    /// Largest deviation between stored states and a replay of the
    /// reconstructed actions through the dynamics, starting from each
    /// preceding stored state.
    pub fn replay_residual(&self, dynamics: &Dynamics) -> f64 {
        let loose = Dynamics {
            dt: self.dt,
            a_max: f64::INFINITY.min(dynamics.a_max.max(1e9)),
        };
        let mut worst = 0.0f64;
        for (k, a) in self.reconstruct_actions().iter().enumerate() {
            let next = loose.step(&self.states[k], a).expect("consistent dims");
            let s = &self.states[k + 1];
            for (x, y) in next
                .position
                .iter()
                .chain(&next.velocity)
                .zip(s.position.iter().chain(&s.velocity))
            {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    pub fn is_collision_free(&self, world: &World, n_samples: usize) -> Result<bool> {
        if let Some(s) = self.states.first() {
            if world.collides(&s.position) {
                return Ok(false);
            }
        }
        for w in self.states.windows(2) {
            if check_segment_collision(&w[0].position, &w[1].position, world, n_samples)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub world_id: String,
    pub d: usize,
    pub dt: f64,
}

impl Dataset {
    pub fn empty(world_id: &str, d: usize, dt: f64) -> Self {
        Dataset {
            trajectories: Vec::new(),
            world_id: world_id.to_string(),
            d,
            dt,
        }
    }

    pub fn total_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_states() == 0
    }

    pub fn state(&self, r: StateRef) -> &State {
        &self.trajectories[r.trajectory].states[r.step]
    }

    pub fn iter_states(&self) -> impl Iterator<Item = (StateRef, &State)> {
        self.trajectories.iter().enumerate().flat_map(|(i, t)| {
            t.states
                .iter()
                .enumerate()
                .map(move |(k, s)| (StateRef { trajectory: i, step: k }, s))
        })
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            if (t.dt - self.dt).abs() > 1e-12 {
                return Err(Error::invalid("all trajectories must share dt"));
            }
            if t.states.iter().any(|s| s.dim() != self.d) {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: t.states.iter().find(|s| s.dim() != self.d).unwrap().dim(),
                });
            }
        }
        Ok(())
    }

    /// Standard deviations of stride-spaced second differences of position
    /// and velocity and of the position/velocity consistency residual.
    pub fn difference_stats(&self, stride: usize) -> DifferenceStats {
        let stride = stride.max(1);
        let h = self.dt * stride as f64;
        let (mut s_acc, mut n_acc) = (0.0, 0usize);
        let (mut s_dyn, mut n_dyn) = (0.0, 0usize);
        for t in &self.trajectories {
            let sub: Vec<&State> = t.states.iter().step_by(stride).collect();
            for w in sub.windows(3) {
                for i in 0..self.d {
                    let dd = w[2].position[i] - 2.0 * w[1].position[i] + w[0].position[i];
                    s_acc += dd * dd;
                    n_acc += 1;
                    let vv = w[2].velocity[i] - 2.0 * w[1].velocity[i] + w[0].velocity[i];
                    s_dyn += vv * vv;
                    n_dyn += 1;
                }
            }
            for w in sub.windows(2) {
                for i in 0..self.d {
                    let r = w[1].position[i] - w[0].position[i] - h * w[0].velocity[i];
                    s_dyn += r * r;
                    n_dyn += 1;
                }
            }
        }
        DifferenceStats {
            position_second_diff_var: if n_acc > 0 { s_acc / n_acc as f64 } else { 0.0 },
            dynamics_residual_var: if n_dyn > 0 { s_dyn / n_dyn as f64 } else { 0.0 },
            samples: n_acc,
        }
    }

    pub fn speed_mean(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (_, st) in self.iter_states() {
            s += st.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceStats {
    /// Mean square (zero-mean variance) of `p[t+2s] − 2p[t+s] + p[t]`.
    pub position_second_diff_var: f64,
    /// Pooled mean square of velocity second differences and of
    /// `p[t+s] − p[t] − s·dt·v[t]`.
    pub dynamics_residual_var: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateRef {
    pub trajectory: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub dynamics: Dynamics,
    pub gains: PdGains,
    /// Nominal speed of the tracked reference, world units per second.
    pub cruise_speed: f64,
    /// Lattice resolution for the stitch planner.
    pub lattice_resolution: f64,
    /// Stitch goals are drawn within this Chebyshev distance of the start.
    pub goal_range: f64,
    /// Explore: steps between forced target resamples.
    pub t_resample: usize,
    /// Explore: targets are drawn within this distance of the current position.
    pub target_range: f64,
    /// Attempts per trajectory before giving up.
    pub retry_budget: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            dynamics: Dynamics::default(),
            gains: PdGains::default(),
            cruise_speed: 1.0,
            lattice_resolution: 0.25,
            goal_range: 6.0,
            t_resample: 40,
            target_range: 2.0,
            retry_budget: 200,
        }
    }
}

/// Sampling region for start/goal draws: the world bounds for 2-D mazes, a
/// centred cube for 3-D worlds.
fn sampling_region(world: &World) -> Aabb {
    match world.kind {
        WorldKind::Maze2d => world.bounds.clone(),
        WorldKind::Boxworld3d => {
            let side = (0..3).map(|i| world.bounds.extent(i)).fold(f64::INFINITY, f64::min);
            let c: Vec<f64> = (0..3)
                .map(|i| 0.5 * (world.bounds.min[i] + world.bounds.max[i]))
                .collect();
            Aabb {
                min: c.iter().map(|x| x - 0.5 * side).collect(),
                max: c.iter().map(|x| x + 0.5 * side).collect(),
            }
        }
    }
}

pub fn generate_stitch(
    world: &World,
    count: usize,
    h_train: usize,
    seed: u64,
    params: &GenParams,
) -> Result<Dataset> {
    if h_train < 2 {
        return Err(Error::invalid("H_train must be at least 2"));
    }
    let mut ds = Dataset::empty(&world.id, world.dim(), params.dynamics.dt);
    if count == 0 {
        return Ok(ds);
    }
    let lattice = Lattice::new(world, params.lattice_resolution)?;
    if lattice.free_count() == 0 {
        return Err(Error::GenerationFailed {
            attempts: 0,
            reason: "world has no free lattice cells".into(),
        });
    }
    let region = sampling_region(world);
    ds.trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed, "stitch", i as u64);
            stitch_one(world, &lattice, &region, h_train, params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ds)
}

fn stitch_one(
    world: &World,
    lattice: &Lattice,
    region: &Aabb,
    h_train: usize,
    params: &GenParams,
    rng: &mut Rng,
) -> Result<Trajectory> {
    for _ in 0..params.retry_budget {
        let Some(start) = world.sample_free_in(region, rng, 1000) else {
            continue;
        };
        let local = Aabb {
            min: start.iter().map(|x| x - params.goal_range).collect(),
            max: start.iter().map(|x| x + params.goal_range).collect(),
        };
        let clipped = Aabb {
            min: local.min.iter().zip(&region.min).map(|(a, b)| a.max(*b)).collect(),
            max: local.max.iter().zip(&region.max).map(|(a, b)| a.min(*b)).collect(),
        };
        let Some(goal) = world.sample_free_in(&clipped, rng, 1000) else {
            continue;
        };
        let Some(path) = lattice.plan(world, &start, &goal)? else {
            continue;
        };
        let reference = time_parameterize(&path, params.cruise_speed, params.dynamics.dt);
        let trace = track_rollout(
            &reference,
            world,
            params.gains,
            &params.dynamics,
            h_train - 1,
        )?;
        let mut states = trace.states;
        states.truncate(h_train);
        let traj = Trajectory {
            states,
            dt: params.dynamics.dt,
            source: Source::Stitch,
        };
        if traj.is_collision_free(world, DEFAULT_COLLISION_SAMPLES)? {
            return Ok(traj);
        }
    }
    Err(Error::GenerationFailed {
        attempts: params.retry_budget,
        reason: "no collision-free stitch trajectory".into(),
    })
}

/// Constant-speed reference along a polyline, one state per control step,
/// ending at rest.
pub fn time_parameterize(path: &[Vec<f64>], speed: f64, dt: f64) -> Vec<State> {
    let d = path[0].len();
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return vec![State::at_rest(path[0].clone())];
    }
    let n = (total / (speed * dt)).ceil() as usize;
    let mut seg = 0usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = (k as f64 * speed * dt).min(total);
        while seg + 1 < path.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let p: Vec<f64> = (0..d)
            .map(|i| path[seg][i] + u * (path[seg + 1][i] - path[seg][i]))
            .collect();
        let v: Vec<f64> = if k == n || len == 0.0 {
            vec![0.0; d]
        } else {
            (0..d)
                .map(|i| speed * (path[seg + 1][i] - path[seg][i]) / len)
                .collect()
        };
        out.push(State {
            position: p,
            velocity: v,
        });
    }
    out
}

pub fn generate_explore(
    world: &World,
    count: usize,
    length: usize,
    seed: u64,
    params: &GenParams,
) -> Result<Dataset> {
    if length < 2 {
        return Err(Error::invalid("explore length must be at least 2"));
    }
    let mut ds = Dataset::empty(&world.id, world.dim(), params.dynamics.dt);
    if count == 0 {
        return Ok(ds);
    }
    let region = sampling_region(world);
    ds.trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed, "explore", i as u64);
            explore_one(world, &region, length, params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ds)
}

fn pick_target(world: &World, from: &[f64], range: f64, rng: &mut Rng) -> Option<Vec<f64>> {
    for _ in 0..50 {
        let local = Aabb {
            min: from.iter().map(|x| x - range).collect(),
            max: from.iter().map(|x| x + range).collect(),
        };
        let t = world.sample_free_in(&local, rng, 20)?;
        let n = ((dist(from, &t) / 0.05).ceil() as usize).max(2);
        if !check_segment_collision(from, &t, world, n).ok()? {
            return Some(t);
        }
    }
    None
}

fn explore_one(
    world: &World,
    region: &Aabb,
    length: usize,
    params: &GenParams,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let dy = &params.dynamics;
    let d = world.dim();
    for _ in 0..params.retry_budget {
        let Some(start) = world.sample_free_in(region, rng, 1000) else {
            continue;
        };
        let mut s = State::at_rest(start);
        let mut states = vec![s.clone()];
        // Carrot moving from `anchor` toward `target` at cruise speed.
        let mut anchor = s.position.clone();
        let mut target = match pick_target(world, &anchor, params.target_range, rng) {
            Some(t) => t,
            None => continue,
        };
        let mut since = 0usize;
        let mut progress = 0.0f64;
        while states.len() < length {
            if since >= params.t_resample {
                if let Some(t) = pick_target(world, &s.position, params.target_range, rng) {
                    anchor = s.position.clone();
                    target = t;
                    progress = 0.0;
                }
                since = 0;
            }
            let seg_len = dist(&anchor, &target);
            progress = (progress + params.cruise_speed * dy.dt).min(seg_len);
            let u = if seg_len > 0.0 { progress / seg_len } else { 1.0 };
            let carrot: Vec<f64> = (0..d).map(|i| anchor[i] + u * (target[i] - anchor[i])).collect();
            let vref: Vec<f64> = if progress < seg_len {
                (0..d)
                    .map(|i| params.cruise_speed * (target[i] - anchor[i]) / seg_len)
                    .collect()
            } else {
                vec![0.0; d]
            };
            let pd = |st: &State| {
                Action::new(
                    (0..d)
                        .map(|i| {
                            params.gains.kp * (carrot[i] - st.position[i])
                                + params.gains.kd * (vref[i] - st.velocity[i])
                        })
                        .collect(),
                )
            };
            let mut next = dy.step(&s, &pd(&s))?;
            if world.collides(&next.position) {
                // Brake and retarget instead of entering the obstacle.
                let brake = Action::new(s.velocity.iter().map(|v| -v / dy.dt).collect());
                next = dy.step(&s, &brake)?;
                if world.collides(&next.position) {
                    break;
                }
                if let Some(t) = pick_target(world, &next.position, params.target_range, rng) {
                    anchor = next.position.clone();
                    target = t;
                    progress = 0.0;
                    since = 0;
                }
            }
            s = next;
            states.push(s.clone());
            since += 1;
        }
        if states.len() >= 2 {
            return Ok(Trajectory {
                states,
                dt: dy.dt,
                source: Source::Explore,
            });
        }
    }
    Err(Error::GenerationFailed {
        attempts: params.retry_budget,
        reason: "no explore trajectory could start".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledStates {
    pub states: Vec<State>,
    pub refs: Vec<StateRef>,
    /// Set when fewer distinct states exist than were requested.
    pub with_replacement: bool,
}

/// `n` states drawn uniformly from the union of all trajectory states.
pub fn sample_states(dataset: &Dataset, n: usize, seed: u64) -> Result<SampledStates> {
    let total = dataset.total_states();
    if total == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let mut rng = seed::rng(seed, "sample_states", 0);
    let mut offsets = Vec::with_capacity(dataset.trajectories.len());
    let mut acc = 0usize;
    for t in &dataset.trajectories {
        offsets.push(acc);
        acc += t.len();
    }
    let locate = |flat: usize| -> StateRef {
        let i = match offsets.binary_search(&flat) {
            Ok(mut i) => {
                // skip empty trajectories sharing the same offset
                while dataset.trajectories[i].is_empty() {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        StateRef {
            trajectory: i,
            step: flat - offsets[i],
        }
    };
    let with_replacement = n > total;
    let flat: Vec<usize> = if with_replacement {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, n).into_vec()
    };
    let refs: Vec<StateRef> = flat.into_iter().map(locate).collect();
    let states = refs.iter().map(|r| dataset.state(*r).clone()).collect();
    Ok(SampledStates {
        states,
        refs,
        with_replacement,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d: usize,
    world_id: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    dt: f64,
    source: Source,
    states: Vec<Vec<f64>>,
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        d: dataset.d,
        world_id: dataset.world_id.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for t in &dataset.trajectories {
        let line = Line {
            dt: t.dt,
            source: t.source,
            states: t.states.iter().map(State::to_flat).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let states = parsed
            .states
            .iter()
            .map(|flat| {
                if flat.len() != 2 * header.d {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("state of length {} in a d={} dataset", flat.len(), header.d),
                    });
                }
                State::from_flat(flat).map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            states,
            dt: parsed.dt,
            source: parsed.source,
        });
    }
    let dt = trajectories.first().map(|t| t.dt).unwrap_or(crate::env::DEFAULT_DT);
    let ds = Dataset {
        trajectories,
        world_id: header.world_id,
        d: header.d,
        dt,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Workspace lattice (8-connected in 2-D, 18-connected in 3-D) searched with
/// A* under the Euclidean heuristic.
pub struct Lattice {
    origin: Vec<f64>,
    res: f64,
    dims: Vec<usize>,
    free: Vec<bool>,
    offsets: Vec<Vec<i64>>,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Lattice {
    pub fn new(world: &World, res: f64) -> Result<Self> {
        if !(res > 0.0) {
            return Err(Error::invalid("lattice resolution must be positive"));
        }
        let d = world.dim();
        let origin: Vec<f64> = (0..d).map(|i| world.bounds.min[i] + 0.5 * res).collect();
        let dims: Vec<usize> = (0..d)
            .map(|i| ((world.bounds.extent(i) / res).floor() as usize).max(1))
            .collect();
        let total: usize = dims.iter().product();
        let mut lat = Lattice {
            origin,
            res,
            dims,
            free: vec![false; total],
            offsets: Vec::new(),
        };
        for idx in 0..total {
            lat.free[idx] = !world.collides(&lat.point(idx));
        }
        lat.offsets = neighbor_offsets(d);
        Ok(lat)
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    fn coords(&self, mut idx: usize) -> Vec<i64> {
        let mut c = vec![0i64; self.dims.len()];
        for (i, n) in self.dims.iter().enumerate() {
            c[i] = (idx % n) as i64;
            idx /= n;
        }
        c
    }

    fn index(&self, c: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        let mut mul = 1usize;
        for (i, n) in self.dims.iter().enumerate() {
            if c[i] < 0 || c[i] >= *n as i64 {
                return None;
            }
            idx += c[i] as usize * mul;
            mul *= n;
        }
        Some(idx)
    }

    fn point(&self, idx: usize) -> Vec<f64> {
        self.coords(idx)
            .iter()
            .enumerate()
            .map(|(i, c)| self.origin[i] + *c as f64 * self.res)
            .collect()
    }

    /// Up to six nearest free lattice vertices with collision-free links to `p`.
    fn attach(&self, world: &World, p: &[f64]) -> Result<Vec<usize>> {
        let base: Vec<i64> = (0..p.len())
            .map(|i| ((p[i] - self.origin[i]) / self.res).round() as i64)
            .collect();
        let span = 2i64;
        let mut cands: Vec<(f64, usize)> = Vec::new();
        let mut c = vec![0i64; p.len()];
        let width = (2 * span + 1) as usize;
        for k in 0..width.pow(p.len() as u32) {
            let mut r = k;
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = base[i] + (r % width) as i64 - span;
                r /= width;
            }
            if let Some(idx) = self.index(&c) {
                if self.free[idx] {
                    cands.push((dist(&self.point(idx), p), idx));
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::new();
        for (_, idx) in cands {
            if out.len() == 6 {
                break;
            }
            if !check_segment_collision(p, &self.point(idx), world, DEFAULT_COLLISION_SAMPLES)? {
                out.push(idx);
            }
        }
        Ok(out)
    }

    /// Geometric path `start → lattice … → goal`, or `None` if unreachable.
    pub fn plan(&self, world: &World, start: &[f64], goal: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
        let starts = self.attach(world, start)?;
        let goals = self.attach(world, goal)?;
        if starts.is_empty() || goals.is_empty() {
            return Ok(None);
        }
        let total = self.free.len();
        let mut g = vec![f64::INFINITY; total];
        let mut parent = vec![usize::MAX; total];
        let mut closed = vec![false; total];
        let mut heap = BinaryHeap::new();
        let goal_cost: std::collections::HashMap<usize, f64> = goals
            .iter()
            .map(|&i| (i, dist(&self.point(i), goal)))
            .collect();
        for &s in &starts {
            let c = dist(start, &self.point(s));
            if c < g[s] {
                g[s] = c;
                heap.push(Open {
                    f: c + dist(&self.point(s), goal),
                    g: c,
                    node: s,
                });
            }
        }
        let mut best: Option<(f64, usize)> = None;
        while let Some(Open { f, g: gn, node }) = heap.pop() {
            if closed[node] || gn > g[node] {
                continue;
            }
            if let Some((b, _)) = best {
                if f >= b {
                    break;
                }
            }
            closed[node] = true;
            if let Some(extra) = goal_cost.get(&node) {
                let total_cost = gn + extra;
                if best.is_none_or(|(b, _)| total_cost < b) {
                    best = Some((total_cost, node));
                }
            }
            let c = self.coords(node);
            let p = self.point(node);
            for off in &self.offsets {
                let nc: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
                let Some(nb) = self.index(&nc) else { continue };
                if !self.free[nb] || closed[nb] {
                    continue;
                }
                let q = self.point(nb);
                let step = dist(&p, &q);
                let ng = gn + step;
                if ng < g[nb] && !check_segment_collision(&p, &q, world, DEFAULT_COLLISION_SAMPLES)? {
                    g[nb] = ng;
                    parent[nb] = node;
                    heap.push(Open {
                        f: ng + dist(&q, goal),
                        g: ng,
                        node: nb,
                    });
                }
            }
        }
        let Some((_, last)) = best else {
            return Ok(None);
        };
        let mut nodes = vec![last];
        while parent[*nodes.last().unwrap()] != usize::MAX {
            nodes.push(parent[*nodes.last().unwrap()]);
        }
        nodes.reverse();
        let mut path = vec![start.to_vec()];
        path.extend(nodes.iter().map(|&n| self.point(n)));
        path.push(goal.to_vec());
        Ok(Some(path))
    }
}

/// 8-neighbourhood in 2-D, 18-neighbourhood (faces and edges) in 3-D.
fn neighbor_offsets(d: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let n = 3usize.pow(d as u32);
    for k in 0..n {
        let mut r = k;
        let off: Vec<i64> = (0..d)
            .map(|_| {
                let v = (r % 3) as i64 - 1;
                r /= 3;
                v
            })
            .collect();
        let nz = off.iter().filter(|v| **v != 0).count();
        if nz == 0 || (d == 3 && nz == 3) {
            continue;
        }
        out.push(off);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn neighborhoods() {
        assert_eq!(neighbor_offsets(2).len(), 8);
        assert_eq!(neighbor_offsets(3).len(), 18);
    }

    #[test]
    fn zero_count_gives_empty_dataset() {
        let w = fixtures::medium_maze();
        let p = GenParams::default();
        assert!(generate_stitch(&w, 0, 200, 1, &p).unwrap().trajectories.is_empty());
        assert!(generate_explore(&w, 0, 100, 1, &p).unwrap().trajectories.is_empty());
    }

    #[test]
    fn stitch_on_fixture_maze() {
        let w = fixtures::medium_maze();
        let p = GenParams::default();
        let ds = generate_stitch(&w, 100, 200, 3, &p).unwrap();
        assert_eq!(ds.trajectories.len(), 100);
        for t in &ds.trajectories {
            assert!(t.len() <= 200 && t.len() >= 2);
            assert!(t.is_collision_free(&w, DEFAULT_COLLISION_SAMPLES).unwrap());
            assert!(t.replay_residual(&p.dynamics) < 1e-9);
            for a in t.reconstruct_actions() {
                assert!(a.acceleration.iter().all(|x| x.abs() <= p.dynamics.a_max + 1e-9));
            }
        }
        let again = generate_stitch(&w, 100, 200, 3, &p).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn explore_covers_fixture_maze() {
        let w = fixtures::medium_maze();
        let p = GenParams::default();
        let ds = generate_explore(&w, 50, 200, 11, &p).unwrap();
        assert_eq!(ds.trajectories.len(), 50);
        let g = w.grid.as_ref().unwrap();
        let free = g.free_cells();
        let mut seen = std::collections::BTreeSet::new();
        for (_, s) in ds.iter_states() {
            if let Some(c) = g.cell_of(&s.position) {
                seen.insert(c);
            }
        }
        let frac = seen.len() as f64 / free.len() as f64;
        assert!(frac >= 0.6, "explore coverage {frac}");
        for t in &ds.trajectories {
            assert!(t.is_collision_free(&w, DEFAULT_COLLISION_SAMPLES).unwrap());
            assert!(t.replay_residual(&p.dynamics) < 1e-9);
        }
        assert_eq!(ds, generate_explore(&w, 50, 200, 11, &p).unwrap());
    }

    #[test]
    fn stitch_in_boxworld() {
        let w = fixtures::bridge_world();
        let p = GenParams::default();
        let ds = generate_stitch(&w, 10, 200, 5, &p).unwrap();
        assert_eq!(ds.d, 3);
        for t in &ds.trajectories {
            assert!(t.is_collision_free(&w, DEFAULT_COLLISION_SAMPLES).unwrap());
        }
    }

    fn toy_dataset(lengths: &[usize]) -> Dataset {
        let trajectories = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| Trajectory {
                states: (0..n)
                    .map(|k| State::at_rest(vec![i as f64, k as f64]))
                    .collect(),
                dt: 0.05,
                source: Source::External,
            })
            .collect();
        Dataset {
            trajectories,
            world_id: "toy".into(),
            d: 2,
            dt: 0.05,
        }
    }

    #[test]
    fn sample_states_examples() {
        let ds = toy_dataset(&[3, 0, 5]);
        let one = sample_states(&ds, 1, 0).unwrap();
        assert_eq!(one.states.len(), 1);
        assert_eq!(ds.state(one.refs[0]), &one.states[0]);

        let all = sample_states(&ds, 8, 0).unwrap();
        assert!(!all.with_replacement);
        let mut refs = all.refs.clone();
        refs.sort();
        refs.dedup();
        assert_eq!(refs.len(), 8);

        let over = sample_states(&ds, 20, 0).unwrap();
        assert!(over.with_replacement);
        assert_eq!(over.states.len(), 20);
    }

    #[test]
    fn sample_states_is_uniform_over_states() {
        // 10^5 states over trajectories of very different lengths.
        let lengths: Vec<usize> = (0..40).map(|i| 500 + 100 * i).collect();
        let total: usize = lengths.iter().sum();
        assert_eq!(total, 98_000);
        let ds = toy_dataset(&lengths);
        // Pool counts over many draws of N=500 to get a stable chi-square.
        let mut counts = vec![0f64; lengths.len()];
        let draws = 40;
        for s in 0..draws {
            for r in sample_states(&ds, 500, s).unwrap().refs {
                counts[r.trajectory] += 1.0;
            }
        }
        let n = (500 * draws) as f64;
        let chi2: f64 = lengths
            .iter()
            .zip(&counts)
            .map(|(&l, &c)| {
                let e = n * l as f64 / total as f64;
                (c - e) * (c - e) / e
            })
            .sum();
        // 39 dof; 99.9th percentile ≈ 72.1
        assert!(chi2 < 72.1, "chi2 = {chi2}");
    }

    #[test]
    fn dataset_round_trips() {
        let w = fixtures::medium_maze();
        let ds = generate_explore(&w, 5, 30, 2, &GenParams::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, ds);

        let empty = Dataset::empty("x", 2, 0.05);
        let mut buf = Vec::new();
        write_dataset(&empty, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), empty);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let w = fixtures::medium_maze();
        let ds = generate_explore(&w, 3, 30, 2, &GenParams::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 40];
        match read_dataset(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_dataset(&b""[..]), Err(Error::Parse { line: 1, .. })));
    }
}
