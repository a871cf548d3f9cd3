//! Covering tours for inspection tasks.
//!
//! Every POI gets a candidate viewpoint set (nearby graph vertices). The
//! tour is an open path from the start that visits at least one candidate of
//! every coverable POI. It is built by multi-start cheapest insertion and
//! then improved by 2-opt, stop relocation and viewpoint re-selection, all under the
//! shortest-path metric of the graph.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dijkstra, downsample_keeping, path_to, GraphPath, WaypointPlan};
use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;

/// Candidate viewpoint vertices per POI, in POI order.
pub type ViewpointSets = Vec<Vec<usize>>;

pub const MAX_BRUTE_POIS: usize = 6;
pub const MAX_BRUTE_CANDIDATES: usize = 4;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The `k` vertices nearest each POI in position space (ties by id), kept
/// only when within `r_obs`.
pub fn assign_viewpoints(
    graph: &ConnectivityGraph,
    pois: &[Vec<f64>],
    k: usize,
    r_obs: f64,
) -> Result<ViewpointSets> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    Ok(pois
        .iter()
        .map(|poi| {
            let mut near: Vec<(f64, usize)> = (0..graph.len())
                .map(|v| (dist(graph.position(v), poi), v))
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.into_iter()
                .take(k)
                .filter(|&(d, _)| d <= r_obs)
                .map(|(_, v)| v)
                .collect()
        })
        .collect())
}

/// Shortest-path costs and predecessors from each stop of interest.
struct Metric {
    rows: BTreeMap<usize, (Vec<f64>, Vec<usize>)>,
}

impl Metric {
    fn new(graph: &ConnectivityGraph, sources: &BTreeSet<usize>) -> Self {
        let list: Vec<usize> = sources.iter().copied().collect();
        let rows = list
            .par_iter()
            .map(|&s| (s, dijkstra(graph, s)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        Metric { rows }
    }

    fn d(&self, a: usize, b: usize) -> f64 {
        self.rows[&a].0[b]
    }

    fn path(&self, a: usize, b: usize) -> Vec<usize> {
        path_to(&self.rows[&a].1, b)
    }

    fn tour_cost(&self, tour: &[usize]) -> f64 {
        tour.windows(2).map(|w| self.d(w[0], w[1])).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionTour {
    /// Visited stops, starting at the start vertex.
    pub stops: Vec<usize>,
    pub cost: f64,
    pub covered: Vec<usize>,
    /// POIs with no reachable candidate viewpoint.
    pub uncovered: Vec<usize>,
    pub path: GraphPath,
    pub plan: WaypointPlan,
}

fn covered_by(stops: &[usize], sets: &ViewpointSets, coverable: &[usize]) -> bool {
    let s: BTreeSet<usize> = stops.iter().copied().collect();
    coverable.iter().all(|&p| sets[p].iter().any(|v| s.contains(v)))
}

/// Cheapest-insertion covering tour with local search.
pub fn inspection_tour(
    graph: &ConnectivityGraph,
    start: usize,
    viewpoint_sets: &ViewpointSets,
    delta_t: f64,
    dilation: f64,
    dt_plan: f64,
) -> Result<InspectionTour> {
    if viewpoint_sets.is_empty() {
        return Err(Error::invalid("no POIs given"));
    }
    if start >= graph.len() {
        return Err(Error::invalid("start vertex out of range"));
    }
    let (from_start, _) = dijkstra(graph, start);
    let sets: ViewpointSets = viewpoint_sets
        .iter()
        .map(|c| c.iter().copied().filter(|&v| from_start[v].is_finite()).collect())
        .collect();
    let (coverable, uncovered): (Vec<usize>, Vec<usize>) =
        (0..sets.len()).partition(|&p| !sets[p].is_empty());
    if !uncovered.is_empty() {
        log::warn!("{} POIs have no reachable viewpoint: {:?}", uncovered.len(), uncovered);
    }
    let mut sources: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    sources.insert(start);
    let m = Metric::new(graph, &sources);

    let mut tour = construct(vec![start], &m, &sets, &coverable);
    improve(&mut tour, &m, &sets, &coverable);
    // Multi-start: seed the construction with each candidate viewpoint.
    let seeds: BTreeSet<usize> = coverable.iter().flat_map(|&p| sets[p].iter().copied()).collect();
    let restarts: Vec<Vec<usize>> = seeds
        .into_par_iter()
        .filter(|&v| v != start)
        .map(|v| {
            let mut t = construct(vec![start, v], &m, &sets, &coverable);
            improve(&mut t, &m, &sets, &coverable);
            t
        })
        .collect();
    for t in restarts {
        if m.tour_cost(&t) < m.tour_cost(&tour) - 1e-12 {
            tour = t;
        }
    }

    let mut ids = vec![start];
    let mut stop_at = Vec::with_capacity(tour.len());
    for w in tour.windows(2) {
        ids.extend(m.path(w[0], w[1]).into_iter().skip(1));
        stop_at.push(ids.len() - 1);
    }
    let path = GraphPath::from_vertices(graph, ids)?;
    // Stops are kept so every selected viewpoint stays in the plan.
    let timed: Vec<(usize, f64)> = path
        .vertex_ids
        .iter()
        .copied()
        .zip(path.nominal_times.iter().copied())
        .collect();
    let plan = downsample_keeping(graph, &timed, &stop_at, delta_t, dilation, dt_plan)?;
    Ok(InspectionTour {
        cost: m.tour_cost(&tour),
        stops: tour,
        covered: coverable,
        uncovered,
        path,
        plan,
    })
}

/// Cheapest insertion of (POI, viewpoint) pairs until every coverable POI
/// is seen.
fn construct(mut tour: Vec<usize>, m: &Metric, sets: &ViewpointSets, coverable: &[usize]) -> Vec<usize> {
    loop {
        let seen: BTreeSet<usize> = tour.iter().copied().collect();
        let pending: Vec<usize> = coverable
            .iter()
            .copied()
            .filter(|&p| !sets[p].iter().any(|v| seen.contains(v)))
            .collect();
        if pending.is_empty() {
            return tour;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for &p in &pending {
            for &v in &sets[p] {
                for pos in 1..=tour.len() {
                    let a = tour[pos - 1];
                    let delta = match tour.get(pos) {
                        Some(&b) => m.d(a, v) + m.d(v, b) - m.d(a, b),
                        None => m.d(a, v),
                    };
                    let cand = (delta, v, pos);
                    if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2))) {
                        best = Some(cand);
                    }
                }
            }
        }
        let (_, v, pos) = best.expect("pending POIs have reachable candidates");
        tour.insert(pos, v);
    }
}

/// Local search until no move improves the cost by more than a hair.
fn improve(tour: &mut Vec<usize>, m: &Metric, sets: &ViewpointSets, coverable: &[usize]) {
    const EPS: f64 = 1e-12;
    loop {
        let cur = m.tour_cost(tour);
        let mut best = (cur, None::<Vec<usize>>);
        let n = tour.len();
        let consider = |cand: Vec<usize>, best: &mut (f64, Option<Vec<usize>>)| {
            let c = m.tour_cost(&cand);
            if c < best.0 - EPS && covered_by(&cand, sets, coverable) {
                *best = (c, Some(cand));
            }
        };
        // Drop a redundant stop.
        for i in 1..n {
            let mut c = tour.clone();
            c.remove(i);
            consider(c, &mut best);
        }
        // 2-opt on the open path (start fixed).
        for i in 1..n {
            for j in i + 1..n {
                let mut c = tour.clone();
                c[i..=j].reverse();
                consider(c, &mut best);
            }
        }
        // Relocate one stop.
        for i in 1..n {
            for j in 1..n {
                if i != j {
                    let mut c = tour.clone();
                    let v = c.remove(i);
                    c.insert(j, v);
                    consider(c, &mut best);
                }
            }
        }
        // Swap a stop for another candidate viewpoint, placed anywhere.
        let alternatives: BTreeSet<usize> = coverable.iter().flat_map(|&p| sets[p].iter().copied()).collect();
        for i in 1..n {
            for &v in &alternatives {
                if v != tour[i] && !tour.contains(&v) {
                    let mut base = tour.clone();
                    base.remove(i);
                    for j in 1..=base.len() {
                        let mut c = base.clone();
                        c.insert(j, v);
                        consider(c, &mut best);
                    }
                }
            }
        }
        // Add a candidate viewpoint anywhere (a later drop may pay it back).
        if best.1.is_none() {
            for &v in &alternatives {
                if tour.contains(&v) {
                    continue;
                }
                for j in 1..=n {
                    let mut c = tour.clone();
                    c.insert(j, v);
                    for r in 1..c.len() {
                        if r != j {
                            let mut d = c.clone();
                            d.remove(r);
                            consider(d, &mut best);
                        }
                    }
                }
            }
        }
        match best.1 {
            Some(t) => *tour = t,
            None => return,
        }
    }
}

/// Exhaustive optimum over viewpoint selections and visit orders.
pub fn brute_force_tour(
    graph: &ConnectivityGraph,
    start: usize,
    viewpoint_sets: &ViewpointSets,
) -> Result<(Vec<usize>, f64)> {
    if viewpoint_sets.len() > MAX_BRUTE_POIS
        || viewpoint_sets.iter().any(|c| c.len() > MAX_BRUTE_CANDIDATES)
    {
        return Err(Error::InstanceTooLarge(format!(
            "{} POIs (max {MAX_BRUTE_POIS}), up to {} candidates each (max {MAX_BRUTE_CANDIDATES})",
            viewpoint_sets.len(),
            viewpoint_sets.iter().map(Vec::len).max().unwrap_or(0)
        )));
    }
    let (from_start, _) = dijkstra(graph, start);
    let sets: Vec<Vec<usize>> = viewpoint_sets
        .iter()
        .map(|c| c.iter().copied().filter(|&v| from_start[v].is_finite()).collect::<Vec<_>>())
        .filter(|c: &Vec<usize>| !c.is_empty())
        .collect();
    let mut sources: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    sources.insert(start);
    let m = Metric::new(graph, &sources);

    let mut best = (f64::INFINITY, vec![start]);
    let mut choice = vec![0usize; sets.len()];
    loop {
        let mut stops: BTreeSet<usize> = choice.iter().zip(&sets).map(|(&i, c)| c[i]).collect();
        stops.remove(&start);
        let mut order: Vec<usize> = stops.into_iter().collect();
        permute(&mut order, 0, &mut |o| {
            let mut c = m.d(start, *o.first().unwrap_or(&start));
            for w in o.windows(2) {
                c += m.d(w[0], w[1]);
            }
            if c < best.0 {
                best.0 = c;
                best.1 = std::iter::once(start).chain(o.iter().copied()).collect();
            }
        });
        // next selection, odometer style
        let mut k = 0;
        loop {
            if k == sets.len() {
                return Ok((best.1, best.0));
            }
            choice[k] += 1;
            if choice[k] < sets[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k + 1 >= v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TemporalEmbedding;
    use crate::env::State;
    use crate::graph::build_graph;
    use crate::planners::tests::random_graph;
    use crate::seed;
    use rand::Rng as _;

    fn grid_graph(n: usize) -> ConnectivityGraph {
        let states: Vec<State> = (0..n * n)
            .map(|i| State::at_rest(vec![(i % n) as f64, (i / n) as f64]))
            .collect();
        build_graph(&states, &TemporalEmbedding::identity(2), 8, Some(1.5)).unwrap()
    }

    #[test]
    fn viewpoint_examples() {
        let g = grid_graph(4);
        let sets = assign_viewpoints(&g, &[vec![2.0, 1.0], vec![50.0, 50.0]], 1, 1.0).unwrap();
        assert_eq!(sets[0], vec![6]);
        assert!(sets[1].is_empty());
    }

    #[test]
    fn viewpoints_match_brute_force() {
        let g = random_graph(80, 6, 3.0, 2);
        let mut rng = seed::rng_from(9);
        let pois: Vec<Vec<f64>> = (0..16)
            .map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let sets = assign_viewpoints(&g, &pois, 3, 1.2).unwrap();
        for (poi, got) in pois.iter().zip(&sets) {
            let mut all: Vec<(f64, usize)> = (0..g.len()).map(|v| (dist(g.position(v), poi), v)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all.iter().take(3).filter(|x| x.0 <= 1.2).map(|x| x.1).collect();
            assert_eq!(got, &expect);
        }
    }

    #[test]
    fn start_alone_covers_nearby_poi() {
        let g = grid_graph(4);
        let sets = assign_viewpoints(&g, &[vec![0.2, 0.0]], 2, 1.0).unwrap();
        let t = inspection_tour(&g, 0, &sets, 1.0, 1.5, 0.2).unwrap();
        assert_eq!(t.stops, vec![0]);
        assert_eq!(t.plan.m(), 0);
    }

    #[test]
    fn shared_viewpoint_visited_once() {
        let g = grid_graph(4);
        let sets: ViewpointSets = vec![vec![15], vec![15]];
        let t = inspection_tour(&g, 0, &sets, 1.0, 1.5, 0.2).unwrap();
        assert_eq!(t.stops, vec![0, 15]);
        assert_eq!(t.covered, vec![0, 1]);
    }

    #[test]
    fn brute_force_examples() {
        let g = grid_graph(4);
        let (stops, cost) = brute_force_tour(&g, 0, &vec![vec![3]]).unwrap();
        assert_eq!(stops, vec![0, 3]);
        assert!((cost - 3.0).abs() < 1e-12);

        // Symmetric about vertex 5 (1,1): POIs at 4 (0,1) and 6 (2,1).
        let (_, c1) = brute_force_tour(&g, 5, &vec![vec![4], vec![6]]).unwrap();
        let (_, c2) = brute_force_tour(&g, 5, &vec![vec![6], vec![4]]).unwrap();
        assert!((c1 - c2).abs() < 1e-12);
        assert!((c1 - 3.0).abs() < 1e-12);

        let too_big: ViewpointSets = vec![vec![1]; 7];
        assert!(matches!(brute_force_tour(&g, 0, &too_big), Err(Error::InstanceTooLarge(_))));
    }

    #[test]
    fn greedy_within_bound_of_optimum() {
        for s in 0..30u64 {
            let g = random_graph(12, 4, 5.0, s);
            let mut rng = seed::rng_from(100 + s);
            let sets: ViewpointSets = (0..4)
                .map(|_| {
                    let k = rng.random_range(1..=3);
                    let mut c: Vec<usize> = (0..k).map(|_| rng.random_range(1..12)).collect();
                    c.sort_unstable();
                    c.dedup();
                    c
                })
                .collect();
            let t = inspection_tour(&g, 0, &sets, 1.0, 1.5, 0.2).unwrap();
            let (_, opt) = brute_force_tour(&g, 0, &sets).unwrap();
            assert!(opt <= t.cost + 1e-9);
            assert!(t.cost <= 1.15 * opt + 1e-9, "seed {s}: {} vs {}", t.cost, opt);
            let visited: BTreeSet<usize> = t.path.vertex_ids.iter().copied().collect();
            for &p in &t.covered {
                assert!(sets[p].iter().any(|v| visited.contains(v)));
            }
        }
    }
}
