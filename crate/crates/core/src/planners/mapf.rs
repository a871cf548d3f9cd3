//! Prioritized multi-agent planning on the connectivity graph.
//!
//! Agents are planned in input order. Each runs A* over `(vertex, step)`
//! nodes, treating the interpolated positions of higher-priority agents as
//! moving obstacles and their goals as occupied after arrival.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{downsample_timed, WaypointPlan, DEFAULT_DILATION};
use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapfParams {
    /// Separation that plans must keep from higher-priority agents.
    pub delta: f64,
    pub delta_t: f64,
    pub dilation: f64,
    /// Cost units traversed per discrete step.
    pub speed: f64,
    pub dt_plan: f64,
    /// Search horizon in steps; `None` picks a bound from the instance.
    pub max_steps: Option<usize>,
}

impl Default for MapfParams {
    fn default() -> Self {
        MapfParams {
            delta: 0.5,
            delta_t: 0.5,
            dilation: DEFAULT_DILATION,
            speed: 0.25,
            dt_plan: 0.2,
            max_steps: None,
        }
    }
}

/// Interpolated positions of one agent, indexed by step; the last entry
/// holds for all later steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeReservation {
    pub positions: Vec<Vec<f64>>,
    pub delta: f64,
}

impl SpaceTimeReservation {
    pub fn at(&self, t: usize) -> &[f64] {
        &self.positions[t.min(self.positions.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub agent: usize,
    /// Search nodes `(vertex, step)` from start to goal; waits repeat a vertex.
    pub timed: Vec<(usize, usize)>,
    pub arrival: usize,
    pub plan: WaypointPlan,
    pub reservation: SpaceTimeReservation,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
}

pub fn step_duration(cost: f64, speed: f64) -> usize {
    ((cost / speed).round() as usize).max(1)
}

/// Per-step positions along a timed node sequence.
pub fn interpolate_positions(graph: &ConnectivityGraph, timed: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut out = vec![graph.position(timed[0].0).to_vec()];
    for w in timed.windows(2) {
        let ((u, t0), (v, t1)) = (w[0], w[1]);
        let d = t1 - t0;
        for s in 1..=d {
            out.push(lerp(graph.position(u), graph.position(v), s as f64 / d as f64));
        }
    }
    out
}

/// Minimum distance between two reservations over all steps (including the
/// parked tails).
pub fn reservation_separation(a: &SpaceTimeReservation, b: &SpaceTimeReservation) -> f64 {
    let n = a.positions.len().max(b.positions.len());
    (0..n)
        .map(|t| dist(a.at(t), b.at(t)))
        .fold(f64::INFINITY, f64::min)
}

#[derive(PartialEq, Eq)]
struct Node {
    f: usize,
    t: usize,
    v: usize,
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .cmp(&self.f)
            .then_with(|| other.t.cmp(&self.t))
            .then_with(|| other.v.cmp(&self.v))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Step-count distances to `goal` (admissible A* heuristic).
fn step_heuristic(graph: &ConnectivityGraph, goal: usize, speed: f64) -> Vec<usize> {
    let n = graph.len();
    let mut h = vec![usize::MAX; n];
    h[goal] = 0;
    let mut heap = BinaryHeap::from([std::cmp::Reverse((0usize, goal))]);
    while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
        if d > h[u] {
            continue;
        }
        for &(v, c) in graph.neighbors(u) {
            let nd = d + step_duration(c, speed);
            if nd < h[v] {
                h[v] = nd;
                heap.push(std::cmp::Reverse((nd, v)));
            }
        }
    }
    h
}

/// Plans one agent against fixed reservations.
pub fn plan_agent(
    graph: &ConnectivityGraph,
    agent: usize,
    start: usize,
    goal: usize,
    params: &MapfParams,
    reserved: &[&SpaceTimeReservation],
) -> Result<AgentPlan> {
    let n = graph.len();
    if start >= n || goal >= n {
        return Err(Error::invalid("vertex id out of range"));
    }
    let h = step_heuristic(graph, goal, params.speed);
    if h[start] == usize::MAX {
        return Err(Error::AgentNoPath { agent });
    }
    let safe = |p: &[f64], t: usize| reserved.iter().all(|r| dist(p, r.at(t)) >= params.delta);
    let horizon_res = reserved.iter().map(|r| r.positions.len()).max().unwrap_or(0);
    let goal_p = graph.position(goal);
    if reserved
        .iter()
        .any(|r| dist(goal_p, r.positions.last().unwrap()) < params.delta)
    {
        return Err(Error::AgentNoPath { agent });
    }
    // Earliest step after which the goal stays clear forever.
    let clear_from = (0..horizon_res)
        .rev()
        .find(|&t| !safe(goal_p, t))
        .map_or(0, |t| t + 1);
    let max_steps = params
        .max_steps
        .unwrap_or(4 * h[start] + horizon_res + 100);

    let mut open = BinaryHeap::from([Node {
        f: h[start],
        t: 0,
        v: start,
    }]);
    let mut closed: HashSet<(usize, usize)> = HashSet::new();
    let mut parent: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut found = None;
    while let Some(Node { t, v, .. }) = open.pop() {
        if !closed.insert((v, t)) {
            continue;
        }
        if v == goal && t >= clear_from {
            found = Some((v, t));
            break;
        }
        if t >= max_steps {
            continue;
        }
        let mut push = |w: usize, t1: usize, open: &mut BinaryHeap<Node>| {
            if h[w] != usize::MAX && !closed.contains(&(w, t1)) {
                parent.entry((w, t1)).or_insert((v, t));
                open.push(Node {
                    f: t1 + h[w],
                    t: t1,
                    v: w,
                });
            }
        };
        let p = graph.position(v);
        if safe(p, t + 1) {
            push(v, t + 1, &mut open);
        }
        for &(w, c) in graph.neighbors(v) {
            let d = step_duration(c, params.speed);
            let q = graph.position(w);
            let ok = (1..=d).all(|s| safe(&lerp(p, q, s as f64 / d as f64), t + s));
            if ok {
                push(w, t + d, &mut open);
            }
        }
    }
    let Some(mut cur) = found else {
        return Err(Error::AgentNoPath { agent });
    };
    let mut timed = vec![cur];
    while let Some(&prev) = parent.get(&cur) {
        if cur == (start, 0) {
            break;
        }
        timed.push(prev);
        cur = prev;
    }
    timed.reverse();
    let nominal: Vec<(usize, f64)> = timed
        .iter()
        .map(|&(v, t)| (v, t as f64 * params.speed))
        .collect();
    let plan = downsample_timed(graph, &nominal, params.delta_t, params.dilation, params.dt_plan)?;
    let positions = interpolate_positions(graph, &timed);
    Ok(AgentPlan {
        agent,
        arrival: timed.last().unwrap().1,
        timed,
        plan,
        reservation: SpaceTimeReservation {
            positions,
            delta: params.delta,
        },
    })
}

/// Plans agents in priority (input) order. Failed agents are reported and
/// impose no reservations on later ones.
pub fn prioritized_plan(
    graph: &ConnectivityGraph,
    queries: &[(usize, usize)],
    params: &MapfParams,
) -> Result<Vec<Result<AgentPlan>>> {
    if queries.is_empty() {
        return Err(Error::invalid("at least one agent required"));
    }
    if !(params.delta > 0.0) || !(params.speed > 0.0) {
        return Err(Error::invalid("delta and speed must be positive"));
    }
    let mut out: Vec<Result<AgentPlan>> = Vec::with_capacity(queries.len());
    for (agent, &(s, g)) in queries.iter().enumerate() {
        let reserved: Vec<&SpaceTimeReservation> = out
            .iter()
            .filter_map(|r| r.as_ref().ok().map(|p| &p.reservation))
            .collect();
        out.push(plan_agent(graph, agent, s, g, params, &reserved));
    }
    Ok(out)
}

/// Each agent planned alone, ignoring the others.
pub fn independent_plan(
    graph: &ConnectivityGraph,
    queries: &[(usize, usize)],
    params: &MapfParams,
) -> Result<Vec<Result<AgentPlan>>> {
    if queries.is_empty() {
        return Err(Error::invalid("at least one agent required"));
    }
    Ok(queries
        .iter()
        .enumerate()
        .map(|(a, &(s, g))| plan_agent(graph, a, s, g, params, &[]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TemporalEmbedding;
    use crate::env::State;
    use crate::graph::build_graph;
    use crate::planners::tests::line_graph;
    use crate::planners::{downsample_waypoints, shortest_path};

    #[test]
    fn single_agent_reduces_to_shortest_path() {
        let g = line_graph(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, 1.0);
        let params = MapfParams {
            speed: 1.0,
            delta_t: 1.5,
            ..MapfParams::default()
        };
        let plans = prioritized_plan(&g, &[(0, 4)], &params).unwrap();
        let p = plans[0].as_ref().unwrap();
        let sp = shortest_path(&g, 0, 4).unwrap();
        let expect = downsample_waypoints(&sp, &g, 1.5, params.dilation, params.dt_plan).unwrap();
        assert_eq!(p.plan, expect);
        let ids: Vec<usize> = p.timed.iter().map(|x| x.0).collect();
        assert_eq!(ids, sp.vertex_ids);
    }

    /// A ring of two parallel rows joined at both ends.
    fn ring() -> ConnectivityGraph {
        let mut states = Vec::new();
        for i in 0..9 {
            states.push(State::at_rest(vec![i as f64 * 0.5, 0.0]));
        }
        for i in 0..9 {
            states.push(State::at_rest(vec![i as f64 * 0.5, 2.0]));
        }
        for y in [0.5, 1.0, 1.5] {
            states.push(State::at_rest(vec![0.0, y]));
            states.push(State::at_rest(vec![4.0, y]));
        }
        build_graph(&states, &TemporalEmbedding::identity(2), 4, Some(0.55)).unwrap()
    }

    #[test]
    fn head_on_agents_keep_separation() {
        let g = ring();
        let params = MapfParams {
            delta: 0.6,
            speed: 0.25,
            ..MapfParams::default()
        };
        let plans = prioritized_plan(&g, &[(0, 8), (8, 0)], &params).unwrap();
        let a = plans[0].as_ref().unwrap();
        let b = plans[1].as_ref().unwrap();
        assert!(reservation_separation(&a.reservation, &b.reservation) >= params.delta);

        let naive = independent_plan(&g, &[(0, 8), (8, 0)], &params).unwrap();
        let (na, nb) = (naive[0].as_ref().unwrap(), naive[1].as_ref().unwrap());
        assert!(reservation_separation(&na.reservation, &nb.reservation) < params.delta);
    }

    #[test]
    fn shared_goal_fails_for_second_agent() {
        let g = ring();
        let plans = prioritized_plan(&g, &[(0, 4), (8, 4)], &MapfParams::default()).unwrap();
        assert!(plans[0].is_ok());
        assert!(matches!(plans[1], Err(Error::AgentNoPath { agent: 1 })));
    }

    #[test]
    fn timed_nodes_are_consistent() {
        let g = ring();
        let params = MapfParams::default();
        let plans = prioritized_plan(&g, &[(0, 17), (17, 0), (9, 8)], &params).unwrap();
        for p in plans.iter().flatten() {
            for w in p.timed.windows(2) {
                let ((u, t0), (v, t1)) = (w[0], w[1]);
                if u == v {
                    assert_eq!(t1, t0 + 1);
                } else {
                    let c = g.edge_cost(u, v).unwrap();
                    assert_eq!(t1 - t0, step_duration(c, params.speed));
                }
            }
            assert_eq!(p.reservation.positions.len(), p.arrival + 1);
        }
        let ok: Vec<_> = plans.iter().flatten().collect();
        for i in 0..ok.len() {
            for j in i + 1..ok.len() {
                assert!(reservation_separation(&ok[i].reservation, &ok[j].reservation) >= params.delta);
            }
        }
    }
}
