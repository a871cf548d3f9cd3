//! Temporal-distance embedding.
//!
//! Landmarks sampled from the dataset are linked by within-trajectory chain
//! arcs (weighted by elapsed time) and by proximity arcs between spatially
//! close landmarks. All-pairs shortest-path times over that graph are then
//! embedded with classical MDS so that Euclidean distance tracks temporal
//! distance. Out-of-sample states are placed by inverse-distance weighting
//! of their nearest landmarks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_states, Dataset, StateRef};
use crate::env::State;
use crate::error::{Error, Result};

pub const DEFAULT_Q: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    IdentityPosition,
    LandmarkMds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    pub landmarks: Vec<State>,
    pub refs: Vec<StateRef>,
    /// Canonical `(i, j, seconds)` with `i < j`, sorted.
    pub arcs: Vec<(usize, usize, f64)>,
    pub dt: f64,
}

impl TransitionGraph {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(i, j, w) in &self.arcs {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        adj
    }
}

/// Weight of a proximity arc, in seconds.
pub fn proximity_link_time(dt: f64) -> f64 {
    2.0 * dt
}

pub fn build_transition_graph(
    dataset: &Dataset,
    n_landmarks: usize,
    link_radius: f64,
    seed: u64,
) -> Result<TransitionGraph> {
    if n_landmarks < 2 {
        return Err(Error::invalid("at least 2 landmarks required"));
    }
    let sampled = sample_states(dataset, n_landmarks.min(dataset.total_states()), seed)?;
    let mut order: Vec<usize> = (0..sampled.refs.len()).collect();
    order.sort_by_key(|&i| sampled.refs[i]);
    let landmarks: Vec<State> = order.iter().map(|&i| sampled.states[i].clone()).collect();
    let refs: Vec<StateRef> = order.iter().map(|&i| sampled.refs[i]).collect();
    Ok(transition_graph_from(landmarks, refs, link_radius, dataset.dt))
}

/// Builds arcs for landmarks already sorted by `(trajectory, step)`.
pub fn transition_graph_from(
    landmarks: Vec<State>,
    refs: Vec<StateRef>,
    link_radius: f64,
    dt: f64,
) -> TransitionGraph {
    let mut arcs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut put = |i: usize, j: usize, w: f64| {
        let key = (i.min(j), i.max(j));
        let e = arcs.entry(key).or_insert(w);
        if w < *e {
            *e = w;
        }
    };
    for k in 1..refs.len() {
        let (a, b) = (refs[k - 1], refs[k]);
        if a.trajectory == b.trajectory && b.step > a.step {
            put(k - 1, k, (b.step - a.step) as f64 * dt);
        }
    }
    let r2 = link_radius * link_radius;
    let link = proximity_link_time(dt);
    for i in 0..landmarks.len() {
        for j in i + 1..landmarks.len() {
            if sq_dist(&landmarks[i].position, &landmarks[j].position) <= r2 {
                put(i, j, link);
            }
        }
    }
    TransitionGraph {
        landmarks,
        refs,
        arcs: arcs.into_iter().map(|((i, j), w)| (i, j, w)).collect(),
        dt,
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

fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Item(0.0, src)]);
    while let Some(Item(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Item(nd, v));
            }
        }
    }
    dist
}

/// All-pairs shortest-path times; `+∞` across components.
pub fn empirical_temporal_distance(tg: &TransitionGraph) -> Result<DMatrix<f64>> {
    let adj = tg.adjacency();
    let n = tg.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(&adj, s)).collect();
    let mut m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    for i in 0..n {
        if m[(i, i)] != 0.0 {
            return Err(Error::Numerical("nonzero diagonal in temporal distances".into()));
        }
        for j in i + 1..n {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if a.is_finite() != b.is_finite() || (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                return Err(Error::Numerical(format!("asymmetric distance at ({i},{j})")));
            }
            // Symmetrize exactly; the two searches may differ in the last ulp.
            let s = a.min(b);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    Ok(m)
}

/// Indices of the largest group of mutually finite-distance entries.
pub fn largest_component(distances: &DMatrix<f64>) -> Vec<usize> {
    let n = distances.nrows();
    let mut label = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    for i in 0..n {
        if label[i] != usize::MAX {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&j| distances[(i, j)].is_finite()).collect();
        for &j in &members {
            label[j] = i;
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsFit {
    /// `n × e`.
    pub coords: DMatrix<f64>,
    /// Top `e` eigenvalues of the double-centred Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Kruskal stress-1 of the fit.
    pub stress: f64,
}

/// Classical multidimensional scaling.
pub fn fit_landmark_mds(distances: &DMatrix<f64>, e: usize) -> Result<MdsFit> {
    let n = distances.nrows();
    if n == 0 || distances.ncols() != n {
        return Err(Error::invalid("distance matrix must be square and nonempty"));
    }
    if e == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    for i in 0..n {
        for j in 0..n {
            let d = distances[(i, j)];
            if !d.is_finite() {
                return Err(Error::invalid("distances must be finite (restrict to one component)"));
            }
            if (d - distances[(j, i)]).abs() > 1e-9 * d.abs().max(1.0) {
                return Err(Error::invalid("distance matrix must be symmetric"));
            }
        }
        if distances[(i, i)] != 0.0 {
            return Err(Error::invalid("distance matrix must have a zero diagonal"));
        }
    }
    let sq = distances.map(|d| d * d);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut coords = DMatrix::zeros(n, e);
    let mut eigenvalues = Vec::with_capacity(e);
    let mut padded = 0usize;
    for (col, &k) in order.iter().take(e).enumerate() {
        let lam = eig.eigenvalues[k];
        eigenvalues.push(lam);
        if lam <= 1e-12 * scale {
            padded += 1;
            continue;
        }
        let s = lam.sqrt();
        // Fix the sign so the largest-magnitude entry is positive.
        let v = eig.eigenvectors.column(k);
        let imax = (0..n).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs()).then(c.cmp(&a))).unwrap();
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[(i, col)] = sign * s * v[i];
        }
    }
    if e > n {
        padded += e - n;
        eigenvalues.resize(e, 0.0);
    }
    if padded > 0 {
        log::warn!("MDS: {padded} of {e} embedding columns have non-positive eigenvalues and were zero-padded");
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = distances[(i, j)];
            let x = (0..e)
                .map(|c| (coords[(i, c)] - coords[(j, c)]).powi(2))
                .sum::<f64>()
                .sqrt();
            num += (d - x) * (d - x);
            den += d * d;
        }
    }
    let stress = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok(MdsFit {
        coords,
        eigenvalues,
        stress,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalEmbedding {
    pub mode: EmbeddingMode,
    pub e: usize,
    /// Nearest landmarks used for out-of-sample placement.
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(rename = "landmarks", with = "flat_states")]
    pub landmark_states: Vec<State>,
    #[serde(rename = "coords")]
    pub landmark_coords: Vec<Vec<f64>>,
    #[serde(default)]
    pub stress: Option<f64>,
}

fn default_q() -> usize {
    DEFAULT_Q
}

mod flat_states {
    use super::State;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[State], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(State::to_flat).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<State>, D::Error> {
        let flat: Vec<Vec<f64>> = Vec::deserialize(d)?;
        flat.iter()
            .map(|f| State::from_flat(f).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub mode: EmbeddingMode,
    pub n_landmarks: usize,
    pub link_radius: f64,
    /// Embedding dimension; `None` means the position dimension.
    pub e: Option<usize>,
    pub q: usize,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        EmbeddingParams {
            mode: EmbeddingMode::LandmarkMds,
            n_landmarks: 500,
            link_radius: 0.25,
            e: None,
            q: DEFAULT_Q,
        }
    }
}

impl TemporalEmbedding {
    pub fn identity(d: usize) -> Self {
        TemporalEmbedding {
            mode: EmbeddingMode::IdentityPosition,
            e: d,
            q: DEFAULT_Q,
            landmark_states: Vec::new(),
            landmark_coords: Vec::new(),
            stress: None,
        }
    }

    /// Fits an embedding of the requested mode on `dataset`. MDS runs on the
    /// largest component of the landmark transition graph.
    pub fn fit(dataset: &Dataset, params: &EmbeddingParams, seed: u64) -> Result<Self> {
        match params.mode {
            EmbeddingMode::IdentityPosition => Ok(TemporalEmbedding::identity(dataset.d)),
            EmbeddingMode::LandmarkMds => {
                let tg = build_transition_graph(dataset, params.n_landmarks, params.link_radius, seed)?;
                let dist = empirical_temporal_distance(&tg)?;
                let keep = largest_component(&dist);
                if keep.len() < tg.len() {
                    log::warn!(
                        "transition graph is disconnected; embedding the largest component ({} of {} landmarks)",
                        keep.len(),
                        tg.len()
                    );
                }
                let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| dist[(keep[i], keep[j])]);
                let e = params.e.unwrap_or(dataset.d);
                let fit = fit_landmark_mds(&sub, e)?;
                log::info!("landmark MDS: {} landmarks, e = {e}, stress = {:.4}", keep.len(), fit.stress);
                Ok(TemporalEmbedding {
                    mode: EmbeddingMode::LandmarkMds,
                    e,
                    q: params.q.max(1),
                    landmark_states: keep.iter().map(|&i| tg.landmarks[i].clone()).collect(),
                    landmark_coords: (0..keep.len())
                        .map(|i| fit.coords.row(i).iter().copied().collect())
                        .collect(),
                    stress: Some(fit.stress),
                })
            }
        }
    }

    pub fn embed(&self, state: &State) -> Result<Vec<f64>> {
        match self.mode {
            EmbeddingMode::IdentityPosition => {
                if state.dim() != self.e {
                    return Err(Error::DimensionMismatch {
                        expected: self.e,
                        got: state.dim(),
                    });
                }
                Ok(state.position.clone())
            }
            EmbeddingMode::LandmarkMds => {
                let first = self
                    .landmark_states
                    .first()
                    .ok_or_else(|| Error::invalid("embedding has no landmarks"))?;
                if state.dim() != first.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: first.dim(),
                        got: state.dim(),
                    });
                }
                let mut near: Vec<(f64, usize)> = self
                    .landmark_states
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (sq_dist(&l.position, &state.position), i))
                    .collect();
                let q = self.q.min(near.len());
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(q);
                if let Some(&(_, i)) = near.iter().find(|(d, i)| {
                    *d == 0.0 && self.landmark_states[*i] == *state
                }) {
                    return Ok(self.landmark_coords[i].clone());
                }
                if near[0].0 == 0.0 {
                    // Same position as a landmark but a different velocity.
                    return Ok(self.landmark_coords[near[0].1].clone());
                }
                let mut out = vec![0.0; self.e];
                let mut wsum = 0.0;
                for &(d2, i) in &near {
                    let w = 1.0 / d2.sqrt();
                    wsum += w;
                    for (o, c) in out.iter_mut().zip(&self.landmark_coords[i]) {
                        *o += w * c;
                    }
                }
                for o in &mut out {
                    *o /= wsum;
                }
                Ok(out)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let emb: TemporalEmbedding = serde_json::from_str(text)?;
        if emb.landmark_coords.len() != emb.landmark_states.len()
            || emb.landmark_coords.iter().any(|c| c.len() != emb.e || c.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::invalid("embedding coords inconsistent with landmarks"));
        }
        Ok(emb)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
