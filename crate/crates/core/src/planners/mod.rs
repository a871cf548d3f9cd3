//! Task-level search over the connectivity graph.
//!
//! [`shortest_path`] and [`downsample_waypoints`] produce the temporal
//! waypoint scaffold for goal reaching; [`mapf`] and [`inspection`] build
//! scaffolds for multi-agent and covering-tour tasks.

pub mod inspection;
pub mod mapf;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;

pub use inspection::{
    assign_viewpoints, brute_force_tour, inspection_tour, InspectionTour, ViewpointSets,
};
pub use mapf::{prioritized_plan, AgentPlan, MapfParams};

pub const DEFAULT_DILATION: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPath {
    pub vertex_ids: Vec<usize>,
    pub nominal_times: Vec<f64>,
    pub total_cost: f64,
}

impl GraphPath {
    pub fn from_vertices(graph: &ConnectivityGraph, ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("path must contain at least one vertex"));
        }
        let mut times = vec![0.0];
        for w in ids.windows(2) {
            let c = graph
                .edge_cost(w[0], w[1])
                .ok_or_else(|| Error::invalid(format!("({}, {}) is not an edge", w[0], w[1])))?;
            times.push(times.last().unwrap() + c);
        }
        Ok(GraphPath {
            total_cost: *times.last().unwrap(),
            vertex_ids: ids,
            nominal_times: times,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    #[serde(with = "flat_state")]
    pub state: State,
}

mod flat_state {
    use crate::env::State;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &State, s: S) -> Result<S::Ok, S::Error> {
        v.to_flat().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<State, D::Error> {
        let flat: Vec<f64> = Vec::deserialize(d)?;
        State::from_flat(&flat).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub dilation: f64,
    /// Dilated nominal times, in seconds.
    pub waypoints: Vec<Waypoint>,
    /// Plan steps spanned by the dilated schedule: `round(t̂_M / dt_plan)`.
    pub horizon_hint: usize,
    pub dt_plan: f64,
    /// Graph vertex of each waypoint.
    #[serde(default)]
    pub vertex_ids: Vec<usize>,
}

impl WaypointPlan {
    /// Index of the last waypoint.
    pub fn m(&self) -> usize {
        self.waypoints.len().saturating_sub(1)
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map(|w| w.t).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: WaypointPlan = serde_json::from_str(text)?;
        if p.waypoints.is_empty() {
            return Err(Error::invalid("plan has no waypoints"));
        }
        Ok(p)
    }
}

#[derive(PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn path_to(pred: &[usize], v: usize) -> Vec<usize> {
    let mut p = vec![v];
    while pred[*p.last().unwrap()] != usize::MAX {
        p.push(pred[*p.last().unwrap()]);
    }
    p.reverse();
    p
}

/// Single-source shortest-path costs and predecessors; among equal-cost
/// paths the lexicographically smallest id sequence wins.
pub fn dijkstra(graph: &ConnectivityGraph, src: usize) -> (Vec<f64>, Vec<usize>) {
    let n = graph.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Item(0.0, src)]);
    while let Some(Item(d, u)) = heap.pop() {
        if done[u] || d > dist[u] {
            continue;
        }
        done[u] = true;
        for &(v, w) in graph.neighbors(u) {
            if done[v] {
                continue;
            }
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = u;
                heap.push(Item(nd, v));
            } else if nd == dist[v] && pred[v] != u {
                let mut cand = path_to(&pred, u);
                cand.push(v);
                if cand < path_to(&pred, v) {
                    pred[v] = u;
                }
            }
        }
    }
    (dist, pred)
}

pub fn shortest_path(graph: &ConnectivityGraph, start: usize, goal: usize) -> Result<GraphPath> {
    let n = graph.len();
    if start >= n || goal >= n {
        return Err(Error::invalid(format!("vertex id out of range (graph has {n})")));
    }
    let (dist, pred) = dijkstra(graph, start);
    if !dist[goal].is_finite() {
        let labels = graph.component_labels();
        return Err(Error::NoPath {
            start,
            goal,
            start_component: labels[start],
            goal_component: labels[goal],
        });
    }
    GraphPath::from_vertices(graph, path_to(&pred, goal))
}

/// Greedy forward selection over `(vertex, nominal time)` pairs: keep the
/// first, then each entry at least `delta_t` after the last kept one, and
/// always the final entry. Times are then scaled by `dilation`.
pub fn downsample_timed(
    graph: &ConnectivityGraph,
    timed: &[(usize, f64)],
    delta_t: f64,
    dilation: f64,
    dt_plan: f64,
) -> Result<WaypointPlan> {
    downsample_keeping(graph, timed, &[], delta_t, dilation, dt_plan)
}

/// As [`downsample_timed`], but the entries at indices in `keep` are always
/// retained (spacing restarts from each of them).
pub fn downsample_keeping(
    graph: &ConnectivityGraph,
    timed: &[(usize, f64)],
    keep: &[usize],
    delta_t: f64,
    dilation: f64,
    dt_plan: f64,
) -> Result<WaypointPlan> {
    if !(delta_t > 0.0) {
        return Err(Error::invalid("delta_t must be positive"));
    }
    if !(dilation >= 1.0) {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    if !(dt_plan > 0.0) {
        return Err(Error::invalid("dt_plan must be positive"));
    }
    let Some(&first) = timed.first() else {
        return Err(Error::invalid("empty path"));
    };
    let mut kept = vec![first];
    for (i, &(v, t)) in timed.iter().enumerate().take(timed.len().saturating_sub(1)).skip(1) {
        let last = kept.last().unwrap().1;
        if t >= last + delta_t || (keep.contains(&i) && t > last) {
            kept.push((v, t));
        }
    }
    if timed.len() > 1 {
        let last = *timed.last().unwrap();
        if kept.len() > 1 && last.1 <= kept.last().unwrap().1 {
            kept.pop();
        }
        kept.push(last);
    }
    let waypoints: Vec<Waypoint> = kept
        .iter()
        .map(|&(v, t)| Waypoint {
            t: t * dilation,
            state: graph.vertices[v].state.clone(),
        })
        .collect();
    let t_m = waypoints.last().unwrap().t;
    Ok(WaypointPlan {
        dilation,
        horizon_hint: (t_m / dt_plan).round() as usize,
        dt_plan,
        vertex_ids: kept.iter().map(|&(v, _)| v).collect(),
        waypoints,
    })
}

pub fn downsample_waypoints(
    path: &GraphPath,
    graph: &ConnectivityGraph,
    delta_t: f64,
    dilation: f64,
    dt_plan: f64,
) -> Result<WaypointPlan> {
    let timed: Vec<(usize, f64)> = path
        .vertex_ids
        .iter()
        .copied()
        .zip(path.nominal_times.iter().copied())
        .collect();
    downsample_timed(graph, &timed, delta_t, dilation, dt_plan)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embedding::TemporalEmbedding;
    use crate::graph::build_graph;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// States on the x axis at the given coordinates; identity embedding.
    pub(crate) fn line_graph(xs: &[f64], k: usize, alpha: f64) -> ConnectivityGraph {
        let states: Vec<State> = xs.iter().map(|&x| State::at_rest(vec![x, 0.0])).collect();
        build_graph(&states, &TemporalEmbedding::identity(2), k, Some(alpha)).unwrap()
    }

    pub(crate) fn random_graph(n: usize, k: usize, alpha: f64, s: u64) -> ConnectivityGraph {
        let mut rng = seed::rng_from(s);
        let states: Vec<State> = (0..n)
            .map(|_| State::at_rest(vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]))
            .collect();
        build_graph(&states, &TemporalEmbedding::identity(2), k, Some(alpha)).unwrap()
    }

    #[test]
    fn chain_examples() {
        let g = line_graph(&[0.0, 1.0, 2.0], 1, 1.0);
        let p = shortest_path(&g, 0, 2).unwrap();
        assert_eq!(p.vertex_ids, vec![0, 1, 2]);
        assert_eq!(p.nominal_times, vec![0.0, 1.0, 2.0]);
        let p = shortest_path(&g, 1, 1).unwrap();
        assert_eq!(p.vertex_ids, vec![1]);
        assert_eq!(p.nominal_times, vec![0.0]);
    }

    #[test]
    fn unreachable_names_components() {
        let g = line_graph(&[0.0, 1.0, 10.0], 1, 1.5);
        match shortest_path(&g, 0, 2) {
            Err(Error::NoPath {
                start_component,
                goal_component,
                ..
            }) => assert_ne!(start_component, goal_component),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_cost_paths_pick_smallest_sequence() {
        // Square 0-1-3 and 0-2-3 with identical costs.
        let states: Vec<State> = [[0.0, 0.0], [1.0, 1.0], [1.0, -1.0], [2.0, 0.0]]
            .iter()
            .map(|p| State::at_rest(p.to_vec()))
            .collect();
        let g = build_graph(&states, &TemporalEmbedding::identity(2), 2, Some(1.5)).unwrap();
        assert_eq!(shortest_path(&g, 0, 3).unwrap().vertex_ids, vec![0, 1, 3]);
        assert_eq!(shortest_path(&g, 3, 0).unwrap().vertex_ids, vec![3, 1, 0]);
    }

    /// Minimum over all simple paths by depth-first enumeration.
    pub(crate) fn brute_min_cost(g: &ConnectivityGraph, s: usize, t: usize) -> f64 {
        fn go(g: &ConnectivityGraph, u: usize, t: usize, seen: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if u == t {
                *best = best.min(acc);
                return;
            }
            for &(v, w) in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    go(g, v, t, seen, acc + w, best);
                    seen[v] = false;
                }
            }
        }
        let mut seen = vec![false; g.len()];
        seen[s] = true;
        let mut best = f64::INFINITY;
        go(g, s, t, &mut seen, 0.0, &mut best);
        best
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        for s in 0..20 {
            let g = random_graph(9, 4, 6.0, s);
            for (a, b) in [(0, 8), (3, 5), (1, 7)] {
                let brute = brute_min_cost(&g, a, b);
                match shortest_path(&g, a, b) {
                    Ok(p) => assert!((p.total_cost - brute).abs() < 1e-9),
                    Err(_) => assert!(brute.is_infinite()),
                }
            }
        }
    }

    fn timed_graph(n: usize) -> ConnectivityGraph {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * 5.0).collect();
        line_graph(&xs, 1, 5.0)
    }

    #[test]
    fn downsample_examples() {
        let g = timed_graph(5);
        let p = shortest_path(&g, 0, 4).unwrap();
        assert_eq!(p.nominal_times, vec![0.0, 5.0, 10.0, 15.0, 20.0]);
        let plan = downsample_waypoints(&p, &g, 12.0, 1.0, 1.0).unwrap();
        assert_eq!(plan.vertex_ids, vec![0, 3, 4]);
        let ts: Vec<f64> = plan.waypoints.iter().map(|w| w.t).collect();
        assert_eq!(ts, vec![0.0, 15.0, 20.0]);
        assert_eq!(plan.horizon_hint, 20);

        let plan = downsample_waypoints(&p, &g, 100.0, 1.0, 1.0).unwrap();
        assert_eq!(plan.vertex_ids, vec![0, 4]);
        let plan = downsample_waypoints(&p, &g, 1e-9, 1.0, 1.0).unwrap();
        assert_eq!(plan.vertex_ids, vec![0, 1, 2, 3, 4]);

        let single = shortest_path(&g, 2, 2).unwrap();
        let plan = downsample_waypoints(&single, &g, 1.0, 1.5, 0.2).unwrap();
        assert_eq!(plan.m(), 0);
        assert_eq!(plan.horizon_hint, 0);
    }

    #[test]
    fn plan_json_round_trip() {
        let g = timed_graph(4);
        let p = shortest_path(&g, 0, 3).unwrap();
        let plan = downsample_waypoints(&p, &g, 6.0, 1.5, 0.2).unwrap();
        assert_eq!(WaypointPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn downsample_invariants(
            gaps in prop::collection::vec(0.01f64..3.0, 1..30),
            dt in 0.05f64..5.0,
            dil in 1.0f64..3.0,
        ) {
            let mut xs = vec![0.0];
            for g in &gaps {
                xs.push(xs.last().unwrap() + g);
            }
            let g = line_graph(&xs, xs.len(), 10.0);
            let n = xs.len();
            let path = GraphPath::from_vertices(&g, (0..n).collect()).unwrap();
            let base = downsample_waypoints(&path, &g, dt, 1.0, 0.1).unwrap();
            let dilated = downsample_waypoints(&path, &g, dt, dil, 0.1).unwrap();
            prop_assert_eq!(base.vertex_ids.first(), Some(&0));
            prop_assert_eq!(base.vertex_ids.last(), Some(&(n - 1)));
            prop_assert_eq!(&base.vertex_ids, &dilated.vertex_ids);
            let ts: Vec<f64> = base.waypoints.iter().map(|w| w.t).collect();
            for w in ts.windows(2).take(ts.len().saturating_sub(2)) {
                prop_assert!(w[1] - w[0] >= dt - 1e-12);
            }
            for w in ts.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
            for (a, b) in base.waypoints.iter().zip(&dilated.waypoints) {
                prop_assert!((b.t - dil * a.t).abs() <= 1e-12 * b.t.max(1.0));
            }
        }

        #[test]
        fn shortest_path_is_no_worse_than_any_walk(seed in 0u64..300, len in 2usize..8) {
            let g = random_graph(30, 5, 4.0, seed);
            let mut rng = seed::rng_from(seed + 1);
            let mut walk = vec![rng.random_range(0..30)];
            for _ in 0..len {
                let nb = g.neighbors(*walk.last().unwrap());
                if nb.is_empty() { break; }
                walk.push(nb[rng.random_range(0..nb.len())].0);
            }
            let cost: f64 = walk.windows(2).map(|w| g.edge_cost(w[0], w[1]).unwrap()).sum();
            let p = shortest_path(&g, walk[0], *walk.last().unwrap()).unwrap();
            prop_assert!(p.total_cost <= cost + 1e-9);
        }

        #[test]
        fn cost_is_invariant_under_relabeling(seed in 0u64..200) {
            let g = random_graph(25, 5, 4.0, seed);
            let n = g.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let states: Vec<State> = perm.iter().map(|&i| g.vertices[i].state.clone()).collect();
            let h = build_graph(&states, &TemporalEmbedding::identity(2), 5, Some(4.0)).unwrap();
            // Same kNN edge set only if no distance ties; compare via brute force on h.
            for (a, b) in [(0, n - 1), (3, 17)] {
                let c1 = shortest_path(&h, perm.iter().position(|&x| x == a).unwrap(),
                                       perm.iter().position(|&x| x == b).unwrap()).map(|p| p.total_cost).ok();
                let c2 = shortest_path(&g, a, b).map(|p| p.total_cost).ok();
                match (c1, c2) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "reachability changed under relabeling"),
                }
            }
        }
    }
}
