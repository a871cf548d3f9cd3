//! Deterministic double-integrator environments.
//!
//! Two world kinds share one collision model: a point agent of radius
//! `agent_radius` moving among axis-aligned blocked regions. `maze2d` worlds
//! are occupancy grids (row `r` covers `y ∈ [r·s, (r+1)·s)`), `boxworld3d`
//! worlds are explicit box lists. Leaving the bounds counts as a collision.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_A_MAX: f64 = 3.0;
pub const DEFAULT_AGENT_RADIUS: f64 = 0.15;
pub const DEFAULT_COLLISION_SAMPLES: usize = 5;
/// Continuous contact longer than this terminates a rollout.
pub const PERSISTENT_CONTACT_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl State {
    pub fn new(position: Vec<f64>, velocity: Vec<f64>) -> Result<Self> {
        if position.len() != velocity.len() {
            return Err(Error::DimensionMismatch {
                expected: position.len(),
                got: velocity.len(),
            });
        }
        if position.iter().chain(&velocity).any(|x| !x.is_finite()) {
            return Err(Error::invalid("state components must be finite"));
        }
        Ok(State { position, velocity })
    }

    pub fn at_rest(position: Vec<f64>) -> Self {
        let velocity = vec![0.0; position.len()];
        State { position, velocity }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// `[p..., v...]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.position.clone();
        out.extend_from_slice(&self.velocity);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) || flat.is_empty() {
            return Err(Error::invalid(format!(
                "flat state needs an even, nonzero length, got {}",
                flat.len()
            )));
        }
        let d = flat.len() / 2;
        State::new(flat[..d].to_vec(), flat[d..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.velocity).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub acceleration: Vec<f64>,
}

impl Action {
    pub fn new(acceleration: Vec<f64>) -> Self {
        Action { acceleration }
    }
}

/// Euler double integrator `p' = p + dt·v`, `v' = v + dt·clip(a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub dt: f64,
    pub a_max: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            dt: DEFAULT_DT,
            a_max: DEFAULT_A_MAX,
        }
    }
}

impl Dynamics {
    pub fn clip(&self, action: &Action) -> Action {
        Action::new(
            action
                .acceleration
                .iter()
                .map(|a| a.clamp(-self.a_max, self.a_max))
                .collect(),
        )
    }

    pub fn step(&self, state: &State, action: &Action) -> Result<State> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        let d = state.dim();
        if state.velocity.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: state.velocity.len(),
            });
        }
        if action.acceleration.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: action.acceleration.len(),
            });
        }
        let mut position = Vec::with_capacity(d);
        let mut velocity = Vec::with_capacity(d);
        for i in 0..d {
            let a = action.acceleration[i].clamp(-self.a_max, self.a_max);
            position.push(state.position[i] + self.dt * state.velocity[i]);
            velocity.push(state.velocity[i] + self.dt * a);
        }
        Ok(State { position, velocity })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Aabb {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::DimensionMismatch {
                expected: min.len(),
                got: max.len(),
            });
        }
        if min.iter().zip(&max).any(|(a, b)| !(a <= b)) {
            return Err(Error::invalid("box min must not exceed max"));
        }
        Ok(Aabb { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn sq_distance(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(x, (lo, hi))| {
                let e = (lo - x).max(0.0).max(x - hi);
                e * e
            })
            .sum()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Maze2d,
    Boxworld3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    /// Row-major, `true` = blocked.
    pub blocked: Vec<bool>,
}

impl OccupancyGrid {
    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    pub fn cell_of(&self, p: &[f64]) -> Option<(usize, usize)> {
        let c = (p[0] / self.cell_size).floor();
        let r = (p[1] / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec<f64> {
        vec![
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_blocked(r, c))
            .collect()
    }

    fn cell_box(&self, row: usize, col: usize) -> Aabb {
        let s = self.cell_size;
        Aabb {
            min: vec![col as f64 * s, row as f64 * s],
            max: vec![(col + 1) as f64 * s, (row + 1) as f64 * s],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub id: String,
    pub kind: WorldKind,
    pub bounds: Aabb,
    pub boxes: Vec<Aabb>,
    pub grid: Option<OccupancyGrid>,
    pub agent_radius: f64,
}

/// On-disk world description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub kind: WorldKind,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_radius")]
    pub agent_radius: f64,
    #[serde(default)]
    pub cell_size: Option<f64>,
    /// maze2d: rows of 0/1, row 0 at the bottom (smallest y).
    #[serde(default)]
    pub cells: Option<Vec<Vec<u8>>>,
    #[serde(default)]
    pub bounds: Option<Aabb>,
    #[serde(default)]
    pub boxes: Option<Vec<Aabb>>,
}

fn default_radius() -> f64 {
    DEFAULT_AGENT_RADIUS
}

impl World {
    pub fn maze(id: &str, rows: &[&str], cell_size: f64, agent_radius: f64) -> Result<Self> {
        let cells = rows
            .iter()
            .map(|r| {
                r.chars()
                    .map(|c| match c {
                        '#' | '1' => Ok(1u8),
                        '.' | '0' | ' ' => Ok(0u8),
                        other => Err(Error::invalid(format!("unknown maze char {other:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        World::from_cells(id, &cells, cell_size, agent_radius)
    }

    pub fn from_cells(
        id: &str,
        cells: &[Vec<u8>],
        cell_size: f64,
        agent_radius: f64,
    ) -> Result<Self> {
        let rows = cells.len();
        if rows == 0 {
            return Err(Error::invalid("maze needs at least one row"));
        }
        let cols = cells[0].len();
        if cols == 0 || cells.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("maze rows must be nonempty and equally long"));
        }
        if !(cell_size > 0.0) || !(agent_radius >= 0.0) {
            return Err(Error::invalid("cell size must be positive, radius nonnegative"));
        }
        let blocked = cells.iter().flatten().map(|&c| c != 0).collect();
        let grid = OccupancyGrid {
            rows,
            cols,
            cell_size,
            blocked,
        };
        Ok(World {
            id: id.to_string(),
            kind: WorldKind::Maze2d,
            bounds: Aabb {
                min: vec![0.0, 0.0],
                max: vec![cols as f64 * cell_size, rows as f64 * cell_size],
            },
            boxes: Vec::new(),
            grid: Some(grid),
            agent_radius,
        })
    }

    pub fn boxworld(id: &str, bounds: Aabb, boxes: Vec<Aabb>, agent_radius: f64) -> Result<Self> {
        if bounds.dim() != 3 {
            return Err(Error::invalid("boxworld3d bounds must be 3-D"));
        }
        if (0..3).any(|i| !(bounds.extent(i) > 0.0)) {
            return Err(Error::invalid("world bounds must be nonempty"));
        }
        for b in &boxes {
            if b.dim() != 3 || !bounds.contains_box(b) {
                return Err(Error::invalid("blocked boxes must lie within the bounds"));
            }
        }
        Ok(World {
            id: id.to_string(),
            kind: WorldKind::Boxworld3d,
            bounds,
            boxes,
            grid: None,
            agent_radius,
        })
    }

    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        let id = spec.id.clone().unwrap_or_else(|| "world".to_string());
        match spec.kind {
            WorldKind::Maze2d => {
                let cells = spec
                    .cells
                    .as_ref()
                    .ok_or_else(|| Error::invalid("maze2d world requires `cells`"))?;
                World::from_cells(&id, cells, spec.cell_size.unwrap_or(1.0), spec.agent_radius)
            }
            WorldKind::Boxworld3d => {
                let bounds = spec
                    .bounds
                    .clone()
                    .ok_or_else(|| Error::invalid("boxworld3d world requires `bounds`"))?;
                World::boxworld(
                    &id,
                    bounds,
                    spec.boxes.clone().unwrap_or_default(),
                    spec.agent_radius,
                )
            }
        }
    }

    pub fn to_spec(&self) -> WorldSpec {
        match &self.grid {
            Some(g) => WorldSpec {
                kind: self.kind,
                id: Some(self.id.clone()),
                agent_radius: self.agent_radius,
                cell_size: Some(g.cell_size),
                cells: Some(
                    g.blocked
                        .chunks(g.cols)
                        .map(|r| r.iter().map(|&b| b as u8).collect())
                        .collect(),
                ),
                bounds: None,
                boxes: None,
            },
            None => WorldSpec {
                kind: self.kind,
                id: Some(self.id.clone()),
                agent_radius: self.agent_radius,
                cell_size: None,
                cells: None,
                bounds: Some(self.bounds.clone()),
                boxes: Some(self.boxes.clone()),
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: WorldSpec = serde_json::from_str(text)?;
        World::from_spec(&spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_spec())?)
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// True iff `p` lies outside the bounds or within `agent_radius` of a
    /// blocked region.
    pub fn collides(&self, p: &[f64]) -> bool {
        if !self.bounds.contains(p) {
            return true;
        }
        let r = self.agent_radius;
        let r2 = r * r;
        if let Some(g) = &self.grid {
            let s = g.cell_size;
            let c0 = ((p[0] - r) / s).floor().max(0.0) as usize;
            let r0 = ((p[1] - r) / s).floor().max(0.0) as usize;
            let c1 = (((p[0] + r) / s).floor() as usize).min(g.cols - 1);
            let r1 = (((p[1] + r) / s).floor() as usize).min(g.rows - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if g.is_blocked(row, col) && g.cell_box(row, col).sq_distance(p) <= r2 {
                        return true;
                    }
                }
            }
            false
        } else {
            self.boxes.iter().any(|b| b.sq_distance(p) <= r2)
        }
    }

    /// Uniform sample of a collision-free position.
    pub fn sample_free(&self, rng: &mut Rng, max_tries: usize) -> Option<Vec<f64>> {
        self.sample_free_in(&self.bounds, rng, max_tries)
    }

    pub fn sample_free_in(&self, region: &Aabb, rng: &mut Rng, max_tries: usize) -> Option<Vec<f64>> {
        for _ in 0..max_tries {
            let p: Vec<f64> = (0..self.dim())
                .map(|i| {
                    let lo = region.min[i].max(self.bounds.min[i]);
                    let hi = region.max[i].min(self.bounds.max[i]);
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect();
            if !self.collides(&p) {
                return Some(p);
            }
        }
        None
    }
}

/// Samples `n_samples` equally spaced points from `p0` to `p1` inclusive and
/// reports whether any of them collides.
pub fn check_segment_collision(
    p0: &[f64],
    p1: &[f64],
    world: &World,
    n_samples: usize,
) -> Result<bool> {
    if p0.len() != world.dim() || p1.len() != world.dim() {
        return Err(Error::DimensionMismatch {
            expected: world.dim(),
            got: if p0.len() != world.dim() { p0.len() } else { p1.len() },
        });
    }
    if n_samples < 2 {
        return Err(Error::invalid("segment collision check needs at least 2 samples"));
    }
    let mut q = vec![0.0; p0.len()];
    for i in 0..n_samples {
        let s = i as f64 / (n_samples - 1) as f64;
        for (k, qk) in q.iter_mut().enumerate() {
            *qk = p0[k] + s * (p1[k] - p0[k]);
        }
        if world.collides(&q) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CollisionStart,
    CollisionEnd,
    PersistentCollision,
    GoalReached,
    PoiObserved(usize),
}

impl EventKind {
    pub fn label(&self) -> String {
        match self {
            EventKind::CollisionStart => "collision_start".into(),
            EventKind::CollisionEnd => "collision_end".into(),
            EventKind::PersistentCollision => "persistent_collision".into(),
            EventKind::GoalReached => "goal_reached".into(),
            EventKind::PoiObserved(i) => format!("poi_observed:{i}"),
        }
    }

    fn parse(label: &str) -> Option<Self> {
        Some(match label {
            "collision_start" => EventKind::CollisionStart,
            "collision_end" => EventKind::CollisionEnd,
            "persistent_collision" => EventKind::PersistentCollision,
            "goal_reached" => EventKind::GoalReached,
            other => EventKind::PoiObserved(other.strip_prefix("poi_observed:")?.parse().ok()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub dt: f64,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn collided(&self) -> bool {
        self.events.iter().any(|e| e.kind == EventKind::CollisionStart)
    }

    pub fn terminated_by_collision(&self) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == EventKind::PersistentCollision)
    }

    /// CSV with columns `step,t,p_*,v_*,a_*,event`. The final row has empty
    /// action cells; multiple events on one step are `;`-separated.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map(State::dim).unwrap_or(0);
        let mut out = String::from("step,t");
        for prefix in ["p", "v", "a"] {
            for i in 0..d {
                let _ = write!(out, ",{prefix}_{i}");
            }
        }
        out.push_str(",event\n");
        for (k, s) in self.states.iter().enumerate() {
            let _ = write!(out, "{k},{}", k as f64 * self.dt);
            for x in s.position.iter().chain(&s.velocity) {
                let _ = write!(out, ",{x}");
            }
            match self.actions.get(k) {
                Some(a) => {
                    for x in &a.acceleration {
                        let _ = write!(out, ",{x}");
                    }
                }
                None => out.push_str(&",".repeat(d)),
            }
            let labels: Vec<String> = self
                .events
                .iter()
                .filter(|e| e.step == k)
                .map(|e| e.kind.label())
                .collect();
            let _ = writeln!(out, ",{}", labels.join(";"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Trace> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty trace file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.iter().filter(|c| c.starts_with("p_")).count();
        if d == 0 || cols.len() != 3 + 3 * d {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut events = Vec::new();
        let mut times = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {} columns, found {}", cols.len(), cells.len()),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("{s:?}: {e}"),
                })
            };
            let step = states.len();
            times.push(num(cells[1])?);
            let p = cells[2..2 + d].iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?;
            let v = cells[2 + d..2 + 2 * d]
                .iter()
                .map(|c| num(c))
                .collect::<Result<Vec<_>>>()?;
            states.push(State::new(p, v).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?);
            let a_cells = &cells[2 + 2 * d..2 + 3 * d];
            if a_cells.iter().all(|c| c.trim().is_empty()) {
                // no action on this row
            } else {
                actions.push(Action::new(
                    a_cells.iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?,
                ));
            }
            let ev = cells[cols.len() - 1].trim();
            if !ev.is_empty() {
                for label in ev.split(';') {
                    let kind = EventKind::parse(label).ok_or_else(|| Error::Parse {
                        line: lineno,
                        message: format!("unknown event {label:?}"),
                    })?;
                    events.push(Event { step, kind });
                }
            }
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { DEFAULT_DT };
        Ok(Trace {
            states,
            actions,
            dt,
            events,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        PdGains { kp: 25.0, kd: 10.0 }
    }
}

/// Tracks `reference` (one state per control step, held at its last element
/// once exhausted) with a per-axis PD law, starting from `reference[0]`.
/// Stops after `max_steps` actions or once contact has persisted longer than
/// [`PERSISTENT_CONTACT_S`].
pub fn track_rollout(
    reference: &[State],
    world: &World,
    gains: PdGains,
    dynamics: &Dynamics,
    max_steps: usize,
) -> Result<Trace> {
    let first = reference
        .first()
        .ok_or_else(|| Error::invalid("reference must be nonempty"))?;
    if !(gains.kp >= 0.0 && gains.kd >= 0.0) {
        return Err(Error::invalid("gains must be nonnegative"));
    }
    if first.dim() != world.dim() {
        return Err(Error::DimensionMismatch {
            expected: world.dim(),
            got: first.dim(),
        });
    }
    let d = first.dim();
    let mut states = vec![first.clone()];
    let mut actions = Vec::new();
    let mut events = Vec::new();
    let mut contact_steps = 0usize;

    if world.collides(&first.position) {
        events.push(Event {
            step: 0,
            kind: EventKind::CollisionStart,
        });
        contact_steps = 1;
    }

    for k in 0..max_steps {
        let s = &states[k];
        let target = &reference[(k + 1).min(reference.len() - 1)];
        let acc: Vec<f64> = (0..d)
            .map(|i| {
                gains.kp * (target.position[i] - s.position[i])
                    + gains.kd * (target.velocity[i] - s.velocity[i])
            })
            .collect();
        let action = dynamics.clip(&Action::new(acc));
        let next = dynamics.step(s, &action)?;
        let step = k + 1;
        if world.collides(&next.position) {
            if contact_steps == 0 {
                events.push(Event {
                    step,
                    kind: EventKind::CollisionStart,
                });
            }
            contact_steps += 1;
        } else if contact_steps > 0 {
            events.push(Event {
                step,
                kind: EventKind::CollisionEnd,
            });
            contact_steps = 0;
        }
        states.push(next);
        actions.push(action);
        if contact_steps as f64 * dynamics.dt > PERSISTENT_CONTACT_S + 1e-9 {
            events.push(Event {
                step,
                kind: EventKind::PersistentCollision,
            });
            break;
        }
    }
    Ok(Trace {
        states,
        actions,
        dt: dynamics.dt,
        events,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn goal_reached(trace: &Trace, goal: &[f64], radius: f64) -> Result<bool> {
    Ok(first_goal_step(trace, goal, radius)?.is_some())
}

pub fn first_goal_step(trace: &Trace, goal: &[f64], radius: f64) -> Result<Option<usize>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("goal radius must be positive"));
    }
    Ok(trace
        .states
        .iter()
        .position(|s| dist(&s.position, goal) <= radius))
}

/// Minimum distance between any two traces at any shared step. `+∞` for
/// fewer than two traces.
pub fn min_pairwise_separation(traces: &[Trace]) -> Result<f64> {
    if traces.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let dt = traces[0].dt;
    if traces.iter().any(|t| (t.dt - dt).abs() > 1e-12) {
        return Err(Error::invalid("traces must share dt"));
    }
    let mut best = f64::INFINITY;
    for i in 0..traces.len() {
        for j in i + 1..traces.len() {
            let n = traces[i].len().min(traces[j].len());
            for t in 0..n {
                best = best.min(dist(
                    &traces[i].states[t].position,
                    &traces[j].states[t].position,
                ));
            }
        }
    }
    Ok(best)
}

/// Fraction of POIs observed (within `r_obs`) by each step, as `(time, fraction)`.
pub fn coverage_curve(trace: &Trace, pois: &[Vec<f64>], r_obs: f64) -> Result<Vec<(f64, f64)>> {
    if !(r_obs > 0.0) {
        return Err(Error::invalid("r_obs must be positive"));
    }
    if pois.is_empty() {
        return Err(Error::invalid("at least one POI required"));
    }
    let mut seen = vec![false; pois.len()];
    let mut count = 0usize;
    let mut curve = Vec::with_capacity(trace.len());
    for (k, s) in trace.states.iter().enumerate() {
        for (i, poi) in pois.iter().enumerate() {
            if !seen[i] && dist(&s.position, poi) <= r_obs {
                seen[i] = true;
                count += 1;
            }
        }
        curve.push((k as f64 * trace.dt, count as f64 / pois.len() as f64));
    }
    Ok(curve)
}

/// Steps at which each POI was first observed.
pub fn poi_events(trace: &Trace, pois: &[Vec<f64>], r_obs: f64) -> Vec<Event> {
    let mut out = Vec::new();
    for (i, poi) in pois.iter().enumerate() {
        if let Some(k) = trace
            .states
            .iter()
            .position(|s| dist(&s.position, poi) <= r_obs)
        {
            out.push(Event {
                step: k,
                kind: EventKind::PoiObserved(i),
            });
        }
    }
    out.sort_by_key(|e| e.step);
    out
}
