//! Connectivity graph over sampled dataset states.
//!
//! Each vertex is linked to its `k` nearest neighbours in embedding space
//! whenever their distance is at most `alpha`; edge cost is that distance.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::TemporalEmbedding;
use crate::env::State;
use crate::error::{Error, Result};

pub const GRAPH_FORMAT: &str = "xplan-graph";
pub const GRAPH_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 30;
pub const DEFAULT_N: usize = 1000;
/// Percentile of pooled kNN distances used when alpha is not given.
pub const ALPHA_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: usize,
    pub state: State,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGraph {
    pub vertices: Vec<Vertex>,
    /// Sorted by `(i, j)`, `i < j`.
    pub edges: Vec<Edge>,
    pub k: usize,
    pub alpha: f64,
    pub embedding_ref: String,
    /// Vertices `0..n_built` came from construction; later ones were inserted.
    pub n_built: usize,
    pub embedding: TemporalEmbedding,
    adjacency: Vec<Vec<(usize, f64)>>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Indices and distances of the `k` points of `pool` nearest to `z`,
/// skipping `skip`; ties go to the smaller index.
fn knn(z: &[f64], pool: &[Vertex], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = pool
        .iter()
        .filter(|v| Some(v.id) != skip)
        .map(|v| (v.id, dist(z, &v.z)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if all.len() > k {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

pub fn embedding_ref(embedding: &TemporalEmbedding) -> String {
    let json = serde_json::to_vec(embedding).expect("embedding serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

fn percentile(mut xs: Vec<f64>, p: f64) -> f64 {
    if xs.is_empty() {
        return f64::INFINITY;
    }
    xs.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * (xs.len() - 1) as f64).round() as usize;
    xs[rank.min(xs.len() - 1)]
}

/// `alpha = None` selects the [`ALPHA_PERCENTILE`] of pooled kNN distances.
pub fn build_graph(
    states: &[State],
    embedding: &TemporalEmbedding,
    k: usize,
    alpha: Option<f64>,
) -> Result<ConnectivityGraph> {
    if states.len() < 2 {
        return Err(Error::invalid("at least 2 states required"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(a) = alpha {
        if !(a > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
    }
    let zs: Vec<Vec<f64>> = states
        .par_iter()
        .map(|s| embedding.embed(s))
        .collect::<Result<_>>()?;
    let vertices: Vec<Vertex> = states
        .iter()
        .zip(zs)
        .enumerate()
        .map(|(id, (s, z))| Vertex {
            id,
            state: s.clone(),
            z,
        })
        .collect();
    let lists: Vec<Vec<(usize, f64)>> = vertices
        .par_iter()
        .map(|v| knn(&v.z, &vertices, k, Some(v.id)))
        .collect();
    let alpha = match alpha {
        Some(a) => a,
        None => {
            let pooled: Vec<f64> = lists.iter().flatten().map(|&(_, d)| d).collect();
            let a = percentile(pooled, ALPHA_PERCENTILE);
            log::info!("alpha defaulted to the {ALPHA_PERCENTILE}th kNN-distance percentile: {a:.4}");
            a.max(f64::MIN_POSITIVE)
        }
    };
    let mut set = BTreeSet::new();
    for (i, list) in lists.iter().enumerate() {
        for &(j, d) in list {
            if d <= alpha {
                set.insert((i.min(j), i.max(j)));
            }
        }
    }
    let edges = set
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            cost: dist(&vertices[i].z, &vertices[j].z),
        })
        .collect();
    let n = vertices.len();
    let mut g = ConnectivityGraph {
        vertices,
        edges,
        k,
        alpha,
        embedding_ref: embedding_ref(embedding),
        n_built: n,
        embedding: embedding.clone(),
        adjacency: Vec::new(),
    };
    g.rebuild_adjacency();
    Ok(g)
}

impl ConnectivityGraph {
    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            adj[e.i].push((e.j, e.cost));
            adj[e.j].push((e.i, e.cost));
        }
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
        }
        self.adjacency = adj;
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Neighbours of `v` in ascending id order, with edge costs.
    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn edge_cost(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .binary_search_by_key(&b, |&(j, _)| j)
            .ok()
            .map(|idx| self.adjacency[a][idx].1)
    }

    pub fn position(&self, v: usize) -> &[f64] {
        &self.vertices[v].state.position
    }

    /// Adds `state` and links it to its `k` nearest existing vertices within
    /// alpha. Existing edges are untouched.
    pub fn insert_vertex(&mut self, state: &State) -> Result<usize> {
        let z = self.embedding.embed(state)?;
        let id = self.vertices.len();
        let near = knn(&z, &self.vertices, self.k, None);
        let mut added = 0;
        for (j, d) in near {
            if d <= self.alpha {
                self.edges.push(Edge { i: j, j: id, cost: d });
                added += 1;
            }
        }
        if added == 0 {
            log::warn!("inserted vertex {id} has no neighbour within alpha = {}", self.alpha);
        }
        self.vertices.push(Vertex {
            id,
            state: state.clone(),
            z,
        });
        self.edges.sort_by_key(|e| (e.i, e.j));
        self.rebuild_adjacency();
        Ok(id)
    }

    /// Copy of the graph with `state` inserted.
    pub fn with_vertex(&self, state: &State) -> Result<(ConnectivityGraph, usize)> {
        let mut g = self.clone();
        let id = g.insert_vertex(state)?;
        Ok((g, id))
    }

    /// Components as sorted id lists, largest first (ties by smallest id).
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &(v, _) in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        q.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        out
    }

    /// Component label per vertex, indexing into [`Self::connected_components`].
    pub fn component_labels(&self) -> Vec<usize> {
        let mut label = vec![0; self.len()];
        for (c, comp) in self.connected_components().iter().enumerate() {
            for &v in comp {
                label[v] = c;
            }
        }
        label
    }

    pub fn largest_component_fraction(&self) -> f64 {
        match self.connected_components().first() {
            Some(c) => c.len() as f64 / self.len() as f64,
            None => 0.0,
        }
    }

    /// Re-checks every structural invariant; returns the list of violations.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let n = self.len();
        let mut prev: Option<(usize, usize)> = None;
        for (idx, v) in self.vertices.iter().enumerate() {
            if v.id != idx {
                bad.push(format!("vertex at position {idx} has id {}", v.id));
            }
            match self.embedding.embed(&v.state) {
                Ok(z) if z.len() == v.z.len() && dist(&z, &v.z) <= 1e-12 => {}
                _ => bad.push(format!("vertex {idx}: stored embedding differs from embed(state)")),
            }
        }
        for e in &self.edges {
            if e.i >= e.j || e.j >= n {
                bad.push(format!("edge ({},{}) not canonical", e.i, e.j));
                continue;
            }
            if let Some(p) = prev {
                if p >= (e.i, e.j) {
                    bad.push(format!("edge ({},{}) duplicated or out of order", e.i, e.j));
                }
            }
            prev = Some((e.i, e.j));
            if e.cost > self.alpha {
                bad.push(format!("edge ({},{}) cost {} exceeds alpha {}", e.i, e.j, e.cost, self.alpha));
            }
            let d = dist(&self.vertices[e.i].z, &self.vertices[e.j].z);
            if (d - e.cost).abs() > 1e-12 {
                bad.push(format!("edge ({},{}) cost {} != distance {}", e.i, e.j, e.cost, d));
            }
            let initiated = if e.j >= self.n_built {
                let pool = &self.vertices[..e.j];
                knn(&self.vertices[e.j].z, pool, self.k, None).iter().any(|&(x, _)| x == e.i)
            } else {
                let pool = &self.vertices[..self.n_built];
                knn(&self.vertices[e.i].z, pool, self.k, Some(e.i)).iter().any(|&(x, _)| x == e.j)
                    || knn(&self.vertices[e.j].z, pool, self.k, Some(e.j)).iter().any(|&(x, _)| x == e.i)
            };
            if !initiated {
                bad.push(format!("edge ({},{}) is not a kNN edge of either endpoint", e.i, e.j));
            }
        }
        bad
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GraphFile = serde_json::from_str(text)?;
        if f.format != GRAPH_FORMAT || f.version != GRAPH_VERSION {
            return Err(Error::invalid(format!("unsupported graph format {} v{}", f.format, f.version)));
        }
        let vertices = f
            .vertices
            .into_iter()
            .map(|v| {
                Ok(Vertex {
                    id: v.id,
                    state: State::from_flat(&v.state)?,
                    z: v.z,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = vertices.len();
        let edges: Vec<Edge> = f
            .edges
            .into_iter()
            .map(|(i, j, cost)| Edge { i, j, cost })
            .collect();
        if edges.iter().any(|e| e.i >= n || e.j >= n) {
            return Err(Error::invalid("edge refers to a missing vertex"));
        }
        let mut g = ConnectivityGraph {
            vertices,
            edges,
            k: f.k,
            alpha: f.alpha,
            embedding_ref: f.embedding_ref,
            n_built: f.n_built,
            embedding: f.embedding,
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct VertexFile {
    id: usize,
    state: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u32,
    k: usize,
    alpha: f64,
    embedding_ref: String,
    n_built: usize,
    vertices: Vec<VertexFile>,
    edges: Vec<(usize, usize, f64)>,
    embedding: TemporalEmbedding,
}

impl From<&ConnectivityGraph> for GraphFile {
    fn from(g: &ConnectivityGraph) -> Self {
        GraphFile {
            format: GRAPH_FORMAT.into(),
            version: GRAPH_VERSION,
            k: g.k,
            alpha: g.alpha,
            embedding_ref: g.embedding_ref.clone(),
            n_built: g.n_built,
            vertices: g
                .vertices
                .iter()
                .map(|v| VertexFile {
                    id: v.id,
                    state: v.state.to_flat(),
                    z: v.z.clone(),
                })
                .collect(),
            edges: g.edges.iter().map(|e| (e.i, e.j, e.cost)).collect(),
            embedding: g.embedding.clone(),
        }
    }
}
