//! Evaluation harnesses: run configuration, per-stage helpers shared with
//! the command line, and the goal-reaching, multi-agent, inspection and
//! ablation runs.
//!
//! Every random stream is derived from `(config.seed, stage, index)` via
//! [`crate::seed`]; episodes run in parallel and are collected by index so
//! reports are byte-identical across runs and thread counts. Wall-times are
//! kept out of the serialized report (see [`EvalReport::timings`]).

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{generate_explore, generate_stitch, sample_states, Dataset, GenParams, Source};
use crate::denoiser::{
    guided_denoise_with, make_layout, make_schedule, DenoiseSchedule, GuidanceField,
    GuidedTrajectory, LocalPrior, SampleMode, SamplerOptions, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN,
    DEFAULT_H_TRAIN, DEFAULT_OVERLAP, DEFAULT_STRIDE, DEFAULT_SWEEPS, DEFAULT_T_STEPS,
};
use crate::embedding::{EmbeddingMode, EmbeddingParams, TemporalEmbedding};
use crate::env::{
    coverage_curve, goal_reached, min_pairwise_separation, track_rollout, State, Trace,
    World, WorldSpec,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{build_graph, ConnectivityGraph};
use crate::planners::inspection::{
    assign_viewpoints, brute_force_tour, inspection_tour, MAX_BRUTE_CANDIDATES, MAX_BRUTE_POIS,
};
use crate::planners::mapf::{independent_plan, prioritized_plan, reservation_separation, MapfParams};
use crate::planners::{downsample_waypoints, shortest_path, WaypointPlan, DEFAULT_DILATION};
use crate::seed;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// One of `medium_maze`, `sealed_maze`, `corridor`, `two_corridor`,
    /// `bridge`. Ignored when `spec` is given.
    pub fixture: Option<String>,
    pub spec: Option<WorldSpecJson>,
}

/// World spec kept as raw JSON so the config stays comparable and hashable.
pub type WorldSpecJson = Value;

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            fixture: Some("medium_maze".into()),
            spec: None,
        }
    }
}

impl WorldConfig {
    pub fn fixture(name: &str) -> Self {
        WorldConfig {
            fixture: Some(name.into()),
            spec: None,
        }
    }

    pub fn build(&self) -> Result<World> {
        if let Some(spec) = &self.spec {
            let spec: WorldSpec = serde_json::from_value(spec.clone())?;
            return World::from_spec(&spec);
        }
        match self.fixture.as_deref() {
            Some("medium_maze") => Ok(fixtures::medium_maze()),
            Some("sealed_maze") => Ok(fixtures::sealed_maze()),
            Some("corridor") => Ok(fixtures::corridor()),
            Some("two_corridor") => Ok(fixtures::two_corridor()),
            Some("bridge") => Ok(fixtures::bridge_world()),
            Some(other) => Err(Error::invalid(format!("unknown world fixture '{other}'"))),
            None => Err(Error::invalid("world needs a fixture name or a spec")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub regime: Source,
    pub count: usize,
    /// Control steps per trajectory.
    pub h_train: usize,
    pub gen: GenParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            regime: Source::Explore,
            count: 500,
            h_train: DEFAULT_H_TRAIN,
            gen: GenParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            n: 1000,
            k: 20,
            alpha: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Downsampling interval in nominal time (embedding cost units).
    pub delta_t: f64,
    pub dilation: f64,
    /// Speed assumed by the unguided heuristic horizon, world units per second.
    pub cruise_speed: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            delta_t: 1.0,
            dilation: DEFAULT_DILATION,
            cruise_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub gamma: f64,
    /// Segment length in control steps.
    pub h_train: usize,
    /// Overlap in control steps.
    pub overlap: usize,
    /// Control steps per plan step.
    pub stride: usize,
    /// Triangular window radius in plan steps; `None` uses the overlap.
    pub radius: Option<f64>,
    pub mode: SampleMode,
    pub position_only: bool,
    pub sweeps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            t_steps: DEFAULT_T_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            gamma: 1.0,
            h_train: DEFAULT_H_TRAIN,
            overlap: DEFAULT_OVERLAP,
            stride: DEFAULT_STRIDE,
            radius: None,
            mode: SampleMode::Deterministic,
            position_only: false,
            sweeps: DEFAULT_SWEEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn h_train_plan(&self) -> usize {
        self.h_train.div_ceil(self.stride.max(1))
    }

    pub fn overlap_plan(&self) -> usize {
        (self.overlap / self.stride.max(1)).max(1)
    }

    pub fn window_radius(&self) -> f64 {
        self.radius.unwrap_or(self.overlap_plan() as f64)
    }

    pub fn schedule(&self) -> Result<DenoiseSchedule> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    Guided,
    Unguided,
    GraphOnly,
}

impl GoalMode {
    pub fn label(self) -> &'static str {
        match self {
            GoalMode::Guided => "guided",
            GoalMode::Unguided => "unguided",
            GoalMode::GraphOnly => "graph_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTask {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

/// Cell `(row, col)` of a unit maze to its centre position.
fn cell(row: usize, col: usize) -> Vec<f64> {
    vec![col as f64 + 0.5, row as f64 + 0.5]
}

/// Five start-goal pairs on the medium maze, longest routes first.
pub fn medium_maze_tasks() -> Vec<GoalTask> {
    [
        ((1, 2), (1, 6)),
        ((1, 1), (1, 8)),
        ((10, 1), (1, 6)),
        ((10, 9), (5, 1)),
        ((10, 1), (1, 10)),
    ]
    .iter()
    .map(|&((r0, c0), (r1, c1))| GoalTask {
        start: cell(r0, c0),
        goal: cell(r1, c1),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub tasks: Vec<GoalTask>,
    /// Indices into `tasks` forming the long-horizon subset.
    pub long_tasks: Vec<usize>,
    /// Start and goal are jittered uniformly by up to this much per axis.
    pub jitter: f64,
    pub goal_radius: f64,
    /// Episode time limit as a multiple of the plan duration.
    pub time_limit_factor: f64,
    pub modes: Vec<GoalMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: (0..5).collect(),
            episodes: 20,
            tasks: medium_maze_tasks(),
            long_tasks: vec![0, 1],
            jitter: 0.2,
            goal_radius: 0.5,
            time_limit_factor: 2.0,
            modes: vec![GoalMode::Guided, GoalMode::Unguided, GoalMode::GraphOnly],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapfConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Execution separation threshold.
    pub delta: f64,
    /// Added to `delta` when planning, as slack for tracking error.
    pub margin: f64,
    pub delta_t: f64,
    pub speed: f64,
}

impl Default for MapfConfig {
    fn default() -> Self {
        MapfConfig {
            episodes: 20,
            seeds: vec![0, 1, 2],
            delta: 0.5,
            margin: 0.3,
            delta_t: 0.5,
            speed: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectionConfig {
    pub starts: usize,
    pub seeds: Vec<u64>,
    pub k_viewpoints: usize,
    pub r_obs: f64,
    /// Spacing of the free-space grid that POIs are drawn from.
    pub poi_grid: f64,
    /// Candidates must lie within this distance of an obstacle box, so POIs
    /// sit on the inspected structure. Ignored for worlds without boxes.
    pub poi_band: f64,
}

impl Default for InspectionConfig {
    fn default() -> Self {
        InspectionConfig {
            starts: 3,
            seeds: vec![0, 1, 2],
            k_viewpoints: 4,
            r_obs: 1.0,
            poi_grid: 0.5,
            poi_band: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    pub delta_t_grid: Vec<f64>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_grid: vec![500],
            k_grid: vec![2, 3, 4, 5, 8, 10, 15, 20, 30, 40, 60],
            alpha_grid: vec![0.5, 0.7, 0.9, 1.2],
            delta_t_grid: vec![0.125, 0.25, 0.375, 0.5],
            episodes: 10,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub embedding: EmbeddingParams,
    pub graph: GraphConfig,
    pub planner: PlannerConfig,
    pub denoiser: DenoiserConfig,
    pub eval: EvalConfig,
    pub mapf: MapfConfig,
    pub inspection: InspectionConfig,
    pub ablation: AblationConfig,
}

fn default_goal_embedding() -> EmbeddingParams {
    EmbeddingParams {
        mode: EmbeddingMode::IdentityPosition,
        ..EmbeddingParams::default()
    }
}

impl RunConfig {
    /// Goal reaching on the medium maze with an explore dataset.
    pub fn goal_reaching() -> Self {
        RunConfig {
            embedding: default_goal_embedding(),
            planner: PlannerConfig {
                delta_t: 0.5,
                ..PlannerConfig::default()
            },
            denoiser: DenoiserConfig {
                gamma: 20.0,
                ..DenoiserConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Crossing agents on the two-corridor fixture.
    pub fn mapf() -> Self {
        let mut c = RunConfig::goal_reaching();
        c.world = WorldConfig::fixture("two_corridor");
        c.dataset.count = 300;
        c.graph.n = 800;
        c.planner.delta_t = c.mapf.delta_t;
        c
    }

    /// POI inspection over the bridge world.
    pub fn inspection() -> Self {
        let mut c = RunConfig::goal_reaching();
        c.world = WorldConfig::fixture("bridge");
        c.dataset.count = 500;
        c.graph.n = 3000;
        c.graph.alpha = Some(0.6);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.denoiser;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(msg.to_string())) };
        check(self.dataset.h_train >= 2, "dataset.h_train must be at least 2")?;
        check(self.graph.n >= 2, "graph.n must be at least 2")?;
        check(self.graph.k >= 1, "graph.k must be at least 1")?;
        check(self.graph.alpha.is_none_or(|a| a > 0.0), "graph.alpha must be positive")?;
        check(self.planner.delta_t > 0.0, "planner.delta_t must be positive")?;
        check(self.planner.dilation >= 1.0, "planner.dilation must be at least 1")?;
        check(self.planner.cruise_speed > 0.0, "planner.cruise_speed must be positive")?;
        check(d.t_steps >= 1, "denoiser.t_steps must be at least 1")?;
        check(d.gamma >= 0.0 && d.gamma.is_finite(), "denoiser.gamma must be non-negative")?;
        check(d.stride >= 1, "denoiser.stride must be at least 1")?;
        check(d.sweeps >= 1, "denoiser.sweeps must be at least 1")?;
        check(d.overlap_plan() < d.h_train_plan(), "denoiser.overlap must be below h_train")?;
        check(d.radius.is_none_or(|r| r > 0.0), "denoiser.radius must be positive")?;
        check(self.eval.goal_radius > 0.0, "eval.goal_radius must be positive")?;
        check(self.eval.time_limit_factor > 0.0, "eval.time_limit_factor must be positive")?;
        check(self.eval.jitter >= 0.0, "eval.jitter must be non-negative")?;
        check(
            self.eval.long_tasks.iter().all(|&i| i < self.eval.tasks.len()),
            "eval.long_tasks index out of range",
        )?;
        check(self.mapf.delta > 0.0 && self.mapf.margin >= 0.0, "mapf.delta/margin invalid")?;
        check(self.mapf.speed > 0.0 && self.mapf.delta_t > 0.0, "mapf.speed/delta_t must be positive")?;
        check(self.inspection.r_obs > 0.0, "inspection.r_obs must be positive")?;
        check(self.inspection.k_viewpoints >= 1, "inspection.k_viewpoints must be at least 1")?;
        check(self.inspection.poi_grid > 0.0, "inspection.poi_grid must be positive")?;
        make_schedule(d.t_steps, d.beta_min, d.beta_max).map(|_| ())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Sets a dotted field such as `graph.k` from a command-line string. The
    /// value is parsed as JSON when possible, otherwise taken as a string.
    pub fn set_path(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for part in path.split('.') {
            node = match node {
                Value::Object(map) if map.contains_key(part) => map.get_mut(part).unwrap(),
                _ => return Err(Error::invalid(format!("unknown config field '{path}'"))),
            };
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let updated: RunConfig = serde_json::from_value(root)
            .map_err(|e| Error::invalid(format!("bad value for '{path}': {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// stages

/// Offline artefacts for one evaluation seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub dataset: Dataset,
    pub embedding: TemporalEmbedding,
    pub graph: ConnectivityGraph,
    pub prior: LocalPrior,
}

pub fn generate_dataset(config: &RunConfig, world: &World, seed: u64) -> Result<Dataset> {
    let c = &config.dataset;
    match c.regime {
        Source::Explore => generate_explore(world, c.count, c.h_train, seed, &c.gen),
        Source::Stitch => generate_stitch(world, c.count, c.h_train, seed, &c.gen),
        Source::External => Err(Error::invalid("external datasets are loaded, not generated")),
    }
}

pub fn fit_embedding(config: &RunConfig, dataset: &Dataset, seed: u64) -> Result<TemporalEmbedding> {
    TemporalEmbedding::fit(dataset, &config.embedding, seed)
}

pub fn graph_from_dataset(
    graph: &GraphConfig,
    dataset: &Dataset,
    embedding: &TemporalEmbedding,
    seed: u64,
) -> Result<ConnectivityGraph> {
    let sampled = sample_states(dataset, graph.n, seed)?;
    build_graph(&sampled.states, embedding, graph.k, graph.alpha)
}

fn prepare(config: &RunConfig, world: &World, eval_seed: u64, timings: &mut Timings) -> Result<SeedContext> {
    let root = config.seed;
    let t0 = Instant::now();
    let dataset = generate_dataset(config, world, seed::derive_seed(root, "dataset", eval_seed))?;
    timings.add("dataset", t0.elapsed());
    let t0 = Instant::now();
    let embedding = fit_embedding(config, &dataset, seed::derive_seed(root, "embedding", eval_seed))?;
    timings.add("embedding", t0.elapsed());
    let t0 = Instant::now();
    let graph = graph_from_dataset(
        &config.graph,
        &dataset,
        &embedding,
        seed::derive_seed(root, "graph", eval_seed),
    )?;
    timings.add("graph_build", t0.elapsed());
    let prior = LocalPrior::fit(&dataset, config.denoiser.stride)?;
    Ok(SeedContext {
        dataset,
        embedding,
        graph,
        prior,
    })
}

/// Shortest path between two states inserted into a copy of `graph`.
pub fn plan_goal(
    graph: &ConnectivityGraph,
    start: &State,
    goal: &State,
    planner: &PlannerConfig,
    dt_plan: f64,
) -> Result<WaypointPlan> {
    let (g1, s) = graph.with_vertex(start)?;
    let (g2, g) = g1.with_vertex(goal)?;
    let path = shortest_path(&g2, s, g)?;
    downsample_waypoints(&path, &g2, planner.delta_t, planner.dilation, dt_plan)
}

/// Waypoint-free field whose horizon covers the straight-line distance at
/// cruise speed, dilated like a graph plan.
pub fn unguided_field(planner: &PlannerConfig, start: &State, goal: &State, dt_plan: f64) -> GuidanceField {
    let dist = start
        .position
        .iter()
        .zip(&goal.position)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let steps = (planner.dilation * dist / planner.cruise_speed / dt_plan).round() as usize;
    GuidanceField::empty((steps + 1).max(2))
}

/// Guided sampling over the horizon implied by `plan`.
pub fn denoise_plan(
    plan: &WaypointPlan,
    prior: &LocalPrior,
    config: &DenoiserConfig,
    seed: u64,
) -> Result<GuidedTrajectory> {
    let field = GuidanceField::from_plan(plan, config.window_radius(), config.gamma, config.position_only)?;
    let start = &plan.waypoints[0].state;
    let goal = &plan.waypoints[plan.m()].state;
    denoise_field(&field, prior, config, (start, goal), seed)
}

pub fn denoise_field(
    field: &GuidanceField,
    prior: &LocalPrior,
    config: &DenoiserConfig,
    endpoints: (&State, &State),
    seed: u64,
) -> Result<GuidedTrajectory> {
    let layout = make_layout(field.horizon, config.h_train_plan(), config.overlap_plan())?;
    let schedule = config.schedule()?;
    let options = SamplerOptions { sweeps: config.sweeps };
    guided_denoise_with(&layout, prior, field, &schedule, endpoints, config.mode, seed, options)
}

/// Waypoint positions interpolated linearly at control rate, each sample
/// carrying the velocity of its segment; the final state is at rest.
pub fn linear_reference(plan: &WaypointPlan, dt: f64) -> Vec<State> {
    let wps = &plan.waypoints;
    let t_end = plan.duration();
    let n = (t_end / dt).round() as usize;
    let d = wps[0].state.dim();
    let mut out = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for j in 0..=n {
        let t = (j as f64 * dt).min(t_end);
        while seg + 2 < wps.len() && t > wps[seg + 1].t {
            seg += 1;
        }
        if wps.len() == 1 || j == n {
            out.push(State::at_rest(wps[wps.len() - 1].state.position.clone()));
            continue;
        }
        let (a, b) = (&wps[seg], &wps[seg + 1]);
        let span = b.t - a.t;
        let s = if span > 0.0 { ((t - a.t) / span).clamp(0.0, 1.0) } else { 1.0 };
        let position = (0..d)
            .map(|i| a.state.position[i] + s * (b.state.position[i] - a.state.position[i]))
            .collect();
        let velocity = (0..d)
            .map(|i| {
                if span > 0.0 {
                    (b.state.position[i] - a.state.position[i]) / span
                } else {
                    0.0
                }
            })
            .collect();
        out.push(State { position, velocity });
    }
    out
}

/// Control steps allowed for a plan of `duration` seconds.
pub fn time_limit_steps(duration: f64, factor: f64, dt: f64) -> usize {
    ((factor * duration / dt).ceil() as usize).max(1)
}

pub fn execute(config: &RunConfig, world: &World, reference: &[State], max_steps: usize) -> Result<Trace> {
    let gen = &config.dataset.gen;
    track_rollout(reference, world, gen.gains, &gen.dynamics, max_steps)
}

// ---------------------------------------------------------------------------
// reports

/// Wall-clock seconds per stage, summed over episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn add(&mut self, stage: &str, d: Duration) {
        *self.seconds.entry(stage.to_string()).or_insert(0.0) += d.as_secs_f64();
    }

    pub fn merge(&mut self, other: &Timings) {
        for (k, v) in &other.seconds {
            *self.seconds.entry(k.clone()).or_insert(0.0) += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub task: usize,
    pub episode: usize,
    pub mode: String,
    pub success: bool,
    pub error: Option<String>,
    pub horizon: Option<usize>,
    pub segments: Option<usize>,
    pub path_cost: Option<f64>,
    pub e_w_final: Option<f64>,
    pub overlap_disagreement: Option<f64>,
    /// Multi-agent: minimum separation over executed traces.
    pub min_separation: Option<f64>,
    /// Multi-agent: minimum separation between graph-level plans.
    pub plan_separation: Option<f64>,
    pub final_coverage: Option<f64>,
    /// Inspection: exhaustive optimum of the same instance, when small enough.
    pub optimal_cost: Option<f64>,
    pub rollout_steps: usize,
    pub collided: bool,
}

impl EpisodeRecord {
    fn new(seed: u64, task: usize, episode: usize, mode: &str) -> Self {
        EpisodeRecord {
            seed,
            task,
            episode,
            mode: mode.to_string(),
            success: false,
            error: None,
            horizon: None,
            segments: None,
            path_cost: None,
            e_w_final: None,
            overlap_disagreement: None,
            min_separation: None,
            plan_separation: None,
            final_coverage: None,
            optimal_cost: None,
            rollout_steps: 0,
            collided: false,
        }
    }

    fn fail(mut self, e: &Error) -> Self {
        self.success = false;
        self.error = Some(e.to_string());
        self
    }

    fn note_denoise(&mut self, g: &GuidedTrajectory) {
        self.horizon = Some(g.states.len());
        self.segments = Some(g.diagnostics.constants.k);
        self.e_w_final = Some(g.diagnostics.e_w_final);
        self.overlap_disagreement = Some(g.diagnostics.overlap_disagreement);
    }
}

/// Mean and population standard deviation across seeds of a per-seed
/// metric, in percent for success rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    /// `None` for all tasks pooled.
    pub task: Option<usize>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub seed: u64,
    pub start: usize,
    pub mode: String,
    /// `(time, fraction covered)` sampled every half second and at the end.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSummary {
    pub max_overlap_disagreement: f64,
    pub flagged: usize,
    pub mean_e_w_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub config_hash: String,
    pub summaries: Vec<Summary>,
    pub episodes: Vec<EpisodeRecord>,
    pub coverage_curves: Vec<CoverageRecord>,
    pub denoiser: DenoiserSummary,
    /// Wall-times are not deterministic, so they are written to a sidecar
    /// file rather than the report itself.
    #[serde(skip)]
    pub timings: Timings,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl EvalReport {
    fn new(kind: &str, config: &RunConfig, episodes: Vec<EpisodeRecord>, timings: Timings) -> Self {
        let mut flagged = 0;
        let mut max_dis: f64 = 0.0;
        let mut e_w = Vec::new();
        for e in &episodes {
            if let Some(d) = e.overlap_disagreement {
                max_dis = max_dis.max(d);
                if d > crate::denoiser::STITCH_TOLERANCE {
                    flagged += 1;
                }
            }
            if let Some(w) = e.e_w_final {
                e_w.push(w);
            }
        }
        EvalReport {
            kind: kind.to_string(),
            config_hash: config.hash(),
            summaries: Vec::new(),
            episodes,
            coverage_curves: Vec::new(),
            denoiser: DenoiserSummary {
                max_overlap_disagreement: max_dis,
                flagged,
                mean_e_w_final: mean_std(&e_w).0,
            },
            timings,
        }
    }

    /// Success rate per seed for `mode` (and `task` if given), then mean and
    /// std across `seeds`.
    fn summarize_success(&mut self, seeds: &[u64], mode: &str, task: Option<usize>) {
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let eps: Vec<&EpisodeRecord> = self
                    .episodes
                    .iter()
                    .filter(|e| e.seed == s && e.mode == mode && task.is_none_or(|t| e.task == t))
                    .collect();
                if eps.is_empty() {
                    0.0
                } else {
                    100.0 * eps.iter().filter(|e| e.success).count() as f64 / eps.len() as f64
                }
            })
            .collect();
        let (mean, std) = mean_std(&per_seed);
        self.summaries.push(Summary {
            mode: mode.to_string(),
            task,
            metric: "success".into(),
            mean,
            std,
            per_seed,
        });
    }

    fn summarize_coverage(&mut self, seeds: &[u64], mode: &str) {
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let xs: Vec<f64> = self
                    .episodes
                    .iter()
                    .filter(|e| e.seed == s && e.mode == mode)
                    .map(|e| 100.0 * e.final_coverage.unwrap_or(0.0))
                    .collect();
                mean_std(&xs).0
            })
            .collect();
        let (mean, std) = mean_std(&per_seed);
        self.summaries.push(Summary {
            mode: mode.to_string(),
            task: None,
            metric: "coverage".into(),
            mean,
            std,
            per_seed,
        });
    }

    pub fn summary(&self, mode: &str, task: Option<usize>) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.mode == mode && s.task == task)
    }

    /// Pooled success rate in percent over the given tasks.
    pub fn success_over(&self, mode: &str, tasks: &[usize]) -> f64 {
        let eps: Vec<&EpisodeRecord> = self
            .episodes
            .iter()
            .filter(|e| e.mode == mode && tasks.contains(&e.task))
            .collect();
        if eps.is_empty() {
            return 0.0;
        }
        100.0 * eps.iter().filter(|e| e.success).count() as f64 / eps.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per episode.
    pub fn episodes_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        let optu = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from(
            "seed,task,episode,mode,success,horizon,segments,path_cost,e_w_final,overlap_disagreement,min_separation,plan_separation,final_coverage,optimal_cost,rollout_steps,collided,error\n",
        );
        for e in &self.episodes {
            let err = e.error.as_deref().unwrap_or("").replace('"', "'");
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"\n",
                e.seed,
                e.task,
                e.episode,
                e.mode,
                e.success,
                optu(e.horizon),
                optu(e.segments),
                opt(e.path_cost),
                opt(e.e_w_final),
                opt(e.overlap_disagreement),
                opt(e.min_separation),
                opt(e.plan_separation),
                opt(e.final_coverage),
                opt(e.optimal_cost),
                e.rollout_steps,
                e.collided,
                err
            ));
        }
        s
    }

    /// Long format: one row per curve sample.
    pub fn coverage_csv(&self) -> String {
        let mut s = String::from("seed,start,mode,time,covered\n");
        for c in &self.coverage_curves {
            for &(t, f) in &c.curve {
                s.push_str(&format!("{},{},{},{t},{f}\n", c.seed, c.start, c.mode));
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// goal reaching

fn jittered(world: &World, p: &[f64], jitter: f64, rng: &mut seed::Rng) -> Vec<f64> {
    if jitter <= 0.0 {
        return p.to_vec();
    }
    for _ in 0..100 {
        let q: Vec<f64> = p.iter().map(|x| x + rng.random_range(-jitter..=jitter)).collect();
        if world.bounds.contains(&q) && !world.collides(&q) {
            return q;
        }
    }
    p.to_vec()
}

#[allow(clippy::too_many_arguments)]
fn goal_episode(
    config: &RunConfig,
    world: &World,
    ctx: &SeedContext,
    (start, goal): (&State, &State),
    mode: GoalMode,
    mut rec: EpisodeRecord,
    denoise_seed: u64,
    timings: &mut Timings,
) -> EpisodeRecord {
    let dt = config.dataset.gen.dynamics.dt;
    let dt_plan = ctx.prior.dt_plan;
    let stride = config.denoiser.stride;
    let t0 = Instant::now();
    let (reference, duration) = match mode {
        GoalMode::Unguided => {
            let field = unguided_field(&config.planner, start, goal, dt_plan);
            let traj = match denoise_field(&field, &ctx.prior, &config.denoiser, (start, goal), denoise_seed) {
                Ok(t) => t,
                Err(e) => return rec.fail(&e),
            };
            timings.add("denoise", t0.elapsed());
            rec.note_denoise(&traj);
            let duration = (traj.states.len() - 1) as f64 * dt_plan;
            (traj.control_reference(stride), duration)
        }
        GoalMode::Guided | GoalMode::GraphOnly => {
            let plan = match plan_goal(&ctx.graph, start, goal, &config.planner, dt_plan) {
                Ok(p) => p,
                Err(e) => return rec.fail(&e),
            };
            timings.add("search", t0.elapsed());
            rec.path_cost = Some(plan.waypoints.last().unwrap().t / plan.dilation);
            let duration = plan.duration();
            if mode == GoalMode::GraphOnly {
                (linear_reference(&plan, dt), duration)
            } else {
                let t1 = Instant::now();
                let traj = match denoise_plan(&plan, &ctx.prior, &config.denoiser, denoise_seed) {
                    Ok(t) => t,
                    Err(e) => return rec.fail(&e),
                };
                timings.add("denoise", t1.elapsed());
                rec.note_denoise(&traj);
                (traj.control_reference(stride), duration)
            }
        }
    };
    let t0 = Instant::now();
    let max_steps = time_limit_steps(duration, config.eval.time_limit_factor, dt);
    let trace = match execute(config, world, &reference, max_steps) {
        Ok(t) => t,
        Err(e) => return rec.fail(&e),
    };
    timings.add("rollout", t0.elapsed());
    rec.rollout_steps = trace.actions.len();
    rec.collided = trace.terminated_by_collision();
    match goal_reached(&trace, &goal.position, config.eval.goal_radius) {
        Ok(ok) => rec.success = ok,
        Err(e) => return rec.fail(&e),
    }
    rec
}

/// Evaluates every (seed, task, episode, mode) of `config.eval`.
pub fn run_goal_reaching(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let world = config.world.build()?;
    let mut timings = Timings::default();
    let mut episodes = Vec::new();
    for &s in &config.eval.seeds {
        let ctx = prepare(config, &world, s, &mut timings)?;
        episodes.extend(goal_episodes(config, &world, &ctx, s, &config.eval.modes, &mut timings));
    }
    let mut report = EvalReport::new("goal_reaching", config, episodes, timings);
    for mode in &config.eval.modes {
        report.summarize_success(&config.eval.seeds, mode.label(), None);
        for t in 0..config.eval.tasks.len() {
            report.summarize_success(&config.eval.seeds, mode.label(), Some(t));
        }
    }
    Ok(report)
}

pub fn episode_index(config: &RunConfig, task: usize, episode: usize) -> u64 {
    (task * config.eval.episodes + episode) as u64
}

/// Sampler seed of goal-reaching episode `idx` under evaluation seed `s`.
pub fn goal_denoise_seed(config: &RunConfig, s: u64, mode: GoalMode, idx: u64) -> u64 {
    seed::derive_seed(seed::derive_seed(config.seed, "denoise", s), mode.label(), idx)
}

/// Start and goal states of one episode.
pub fn episode_endpoints(config: &RunConfig, world: &World, s: u64, task: usize, episode: usize) -> (State, State) {
    let t = &config.eval.tasks[task];
    let idx = episode_index(config, task, episode);
    let mut rng = seed::rng(seed::derive_seed(config.seed, "episode", s), "endpoints", idx);
    let start = State::at_rest(jittered(world, &t.start, config.eval.jitter, &mut rng));
    let goal = State::at_rest(jittered(world, &t.goal, config.eval.jitter, &mut rng));
    (start, goal)
}

fn goal_episodes(
    config: &RunConfig,
    world: &World,
    ctx: &SeedContext,
    s: u64,
    modes: &[GoalMode],
    timings: &mut Timings,
) -> Vec<EpisodeRecord> {
    let jobs: Vec<(usize, usize, GoalMode)> = (0..config.eval.tasks.len())
        .flat_map(|t| (0..config.eval.episodes).flat_map(move |e| modes.iter().map(move |&m| (t, e, m))))
        .collect();
    let out: Vec<(EpisodeRecord, Timings)> = jobs
        .par_iter()
        .map(|&(task, episode, mode)| {
            let (start, goal) = episode_endpoints(config, world, s, task, episode);
            let dseed = goal_denoise_seed(config, s, mode, episode_index(config, task, episode));
            let mut tm = Timings::default();
            let rec = EpisodeRecord::new(s, task, episode, mode.label());
            let rec = goal_episode(config, world, ctx, (&start, &goal), mode, rec, dseed, &mut tm);
            (rec, tm)
        })
        .collect();
    out.into_iter()
        .map(|(r, tm)| {
            timings.merge(&tm);
            r
        })
        .collect()
}

// ---------------------------------------------------------------------------
// multi-agent

/// Agents alternate left-to-right and right-to-left; slots are drawn without
/// replacement so no start coincides with another agent's goal.
pub fn mapf_endpoints(n_agents: usize, rng: &mut seed::Rng) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let (mut left, mut right) = fixtures::two_corridor_slots();
    if n_agents > left.len().min(right.len()) {
        return Err(Error::invalid("more agents than room slots"));
    }
    let mut take = |pool: &mut Vec<Vec<f64>>| pool.swap_remove(rng.random_range(0..pool.len()));
    Ok((0..n_agents)
        .map(|a| {
            if a % 2 == 0 {
                let s = take(&mut left);
                (s, take(&mut right))
            } else {
                let s = take(&mut right);
                (s, take(&mut left))
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn mapf_episode(
    config: &RunConfig,
    world: &World,
    ctx: &SeedContext,
    endpoints: &[(Vec<f64>, Vec<f64>)],
    prioritized: bool,
    mut rec: EpisodeRecord,
    dseed: u64,
    timings: &mut Timings,
) -> EpisodeRecord {
    let mc = &config.mapf;
    let dt = config.dataset.gen.dynamics.dt;
    let t0 = Instant::now();
    let mut g = ctx.graph.clone();
    let mut queries = Vec::with_capacity(endpoints.len());
    for (s, e) in endpoints {
        let inserted = g
            .insert_vertex(&State::at_rest(s.clone()))
            .and_then(|a| Ok((a, g.insert_vertex(&State::at_rest(e.clone()))?)));
        match inserted {
            Ok(q) => queries.push(q),
            Err(e) => return rec.fail(&e),
        }
    }
    let params = MapfParams {
        delta: mc.delta + mc.margin,
        delta_t: mc.delta_t,
        dilation: config.planner.dilation,
        speed: mc.speed,
        dt_plan: ctx.prior.dt_plan,
        max_steps: None,
    };
    let planned = if prioritized {
        prioritized_plan(&g, &queries, &params)
    } else {
        independent_plan(&g, &queries, &params)
    };
    timings.add("search", t0.elapsed());
    let plans = match planned.and_then(|ps| ps.into_iter().collect::<Result<Vec<_>>>()) {
        Ok(p) => p,
        Err(e) => return rec.fail(&e),
    };
    let mut plan_sep = f64::INFINITY;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            plan_sep = plan_sep.min(reservation_separation(&plans[i].reservation, &plans[j].reservation));
        }
    }
    rec.plan_separation = plan_sep.is_finite().then_some(plan_sep);
    rec.path_cost = Some(plans.iter().map(|p| p.arrival as f64 * mc.speed).sum());

    let t0 = Instant::now();
    let mut refs = Vec::with_capacity(plans.len());
    let mut e_w: f64 = 0.0;
    let mut dis: f64 = 0.0;
    for (a, p) in plans.iter().enumerate() {
        match denoise_plan(&p.plan, &ctx.prior, &config.denoiser, seed::derive_seed(dseed, "agent", a as u64)) {
            Ok(t) => {
                e_w += t.diagnostics.e_w_final;
                dis = dis.max(t.diagnostics.overlap_disagreement);
                refs.push(t.control_reference(config.denoiser.stride));
            }
            Err(e) => return rec.fail(&e),
        }
    }
    rec.e_w_final = Some(e_w);
    rec.overlap_disagreement = Some(dis);
    timings.add("denoise", t0.elapsed());

    let t0 = Instant::now();
    let longest = plans.iter().map(|p| p.plan.duration()).fold(0.0, f64::max);
    let max_steps = time_limit_steps(longest, config.eval.time_limit_factor, dt);
    let mut traces = Vec::with_capacity(refs.len());
    for r in &refs {
        match execute(config, world, r, max_steps) {
            Ok(t) => traces.push(t),
            Err(e) => return rec.fail(&e),
        }
    }
    timings.add("rollout", t0.elapsed());
    let sep = match min_pairwise_separation(&traces) {
        Ok(s) => s,
        Err(e) => return rec.fail(&e),
    };
    rec.min_separation = sep.is_finite().then_some(sep);
    rec.rollout_steps = traces.iter().map(|t| t.actions.len()).max().unwrap_or(0);
    rec.collided = traces.iter().any(Trace::terminated_by_collision);
    let reached = traces
        .iter()
        .zip(endpoints)
        .all(|(t, (_, g))| goal_reached(t, g, config.eval.goal_radius).unwrap_or(false));
    rec.success = reached && sep >= mc.delta && !rec.collided;
    rec
}

/// Naive (independent) and prioritized planning for `n_agents` crossing
/// agents, `config.mapf.episodes` per seed.
pub fn run_mapf(config: &RunConfig, n_agents: usize) -> Result<EvalReport> {
    config.validate()?;
    if n_agents == 0 {
        return Err(Error::invalid("at least one agent required"));
    }
    let world = config.world.build()?;
    let mut timings = Timings::default();
    let mut episodes = Vec::new();
    let modes = [("naive", false), ("prioritized", true)];
    for &s in &config.mapf.seeds {
        let ctx = prepare(config, &world, s, &mut timings)?;
        let jobs: Vec<(usize, usize)> = (0..config.mapf.episodes).flat_map(|e| [(e, 0), (e, 1)]).collect();
        let out: Vec<(EpisodeRecord, Timings)> = jobs
            .par_iter()
            .map(|&(e, m)| {
                let mut tm = Timings::default();
                let (label, prioritized) = modes[m];
                let rec = EpisodeRecord::new(s, n_agents, e, label);
                let mut rng = seed::rng(seed::derive_seed(config.seed, "mapf", s), "endpoints", e as u64);
                let rec = match mapf_endpoints(n_agents, &mut rng) {
                    Ok(ends) => {
                        let dseed = seed::derive_seed(seed::derive_seed(config.seed, "denoise", s), label, e as u64);
                        mapf_episode(config, &world, &ctx, &ends, prioritized, rec, dseed, &mut tm)
                    }
                    Err(err) => rec.fail(&err),
                };
                (rec, tm)
            })
            .collect();
        for (r, tm) in out {
            timings.merge(&tm);
            episodes.push(r);
        }
    }
    let mut report = EvalReport::new("mapf", config, episodes, timings);
    for (label, _) in modes {
        report.summarize_success(&config.mapf.seeds, label, None);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// inspection

/// Farthest-point sampling of `n` POIs from a free-space grid with spacing
/// `spacing`, restricted to points within `band` of an obstacle box when the
/// world has any; the first point is drawn at random.
pub fn place_pois(world: &World, n: usize, spacing: f64, band: f64, rng: &mut seed::Rng) -> Result<Vec<Vec<f64>>> {
    let b = &world.bounds;
    let d = world.dim();
    let counts: Vec<usize> = (0..d).map(|i| (b.extent(i) / spacing).floor() as usize).collect();
    let mut grid = Vec::new();
    let mut idx = vec![0usize; d];
    'outer: loop {
        let p: Vec<f64> = (0..d).map(|i| b.min[i] + (idx[i] as f64 + 0.5) * spacing).collect();
        let near = world.boxes.is_empty() || world.boxes.iter().any(|bx| bx.sq_distance(&p) <= band * band);
        if near && b.contains(&p) && !world.collides(&p) {
            grid.push(p);
        }
        for i in 0..d {
            idx[i] += 1;
            if idx[i] < counts[i] {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    if grid.len() < n {
        return Err(Error::invalid(format!("only {} free grid points for {n} POIs", grid.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let dist = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut chosen = vec![rng.random_range(0..grid.len())];
    let mut nearest: Vec<f64> = grid.iter().map(|p| dist(p, &grid[chosen[0]])).collect();
    while chosen.len() < n {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        chosen.push(far);
        for (i, p) in grid.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(p, &grid[far]));
        }
    }
    Ok(chosen.into_iter().map(|i| grid[i].clone()).collect())
}

fn sample_curve(curve: &[(f64, f64)], every: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut next = 0.0;
    for (i, &(t, f)) in curve.iter().enumerate() {
        if t + 1e-9 >= next || i + 1 == curve.len() {
            out.push((t, f));
            next = t + every;
        }
    }
    out
}

fn concat_traces(parts: Vec<Trace>) -> Trace {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one trace");
    for t in it {
        acc.actions.extend(t.actions);
        acc.states.extend(t.states.into_iter().skip(1));
    }
    acc
}

struct InspectionOutcome {
    trace: Trace,
    budget: usize,
}

#[allow(clippy::too_many_arguments)]
fn tour_episode(
    config: &RunConfig,
    world: &World,
    ctx: &SeedContext,
    start: &State,
    pois: &[Vec<f64>],
    rec: &mut EpisodeRecord,
    dseed: u64,
    timings: &mut Timings,
) -> Result<InspectionOutcome> {
    let ic = &config.inspection;
    let dt = config.dataset.gen.dynamics.dt;
    let t0 = Instant::now();
    let (g, s) = ctx.graph.with_vertex(start)?;
    let sets = assign_viewpoints(&g, pois, ic.k_viewpoints, ic.r_obs)?;
    let tour = inspection_tour(
        &g,
        s,
        &sets,
        config.planner.delta_t,
        config.planner.dilation,
        ctx.prior.dt_plan,
    )?;
    timings.add("search", t0.elapsed());
    rec.path_cost = Some(tour.cost);
    if pois.len() <= MAX_BRUTE_POIS && sets.iter().all(|c| c.len() <= MAX_BRUTE_CANDIDATES) {
        rec.optimal_cost = Some(brute_force_tour(&g, s, &sets)?.1);
    }
    let budget = time_limit_steps(tour.plan.duration(), config.eval.time_limit_factor, dt);
    let reference = if tour.plan.m() == 0 {
        vec![start.clone()]
    } else {
        let t0 = Instant::now();
        let traj = denoise_plan(&tour.plan, &ctx.prior, &config.denoiser, dseed)?;
        timings.add("denoise", t0.elapsed());
        rec.note_denoise(&traj);
        traj.control_reference(config.denoiser.stride)
    };
    let t0 = Instant::now();
    let trace = execute(config, world, &reference, budget)?;
    timings.add("rollout", t0.elapsed());
    Ok(InspectionOutcome { trace, budget })
}

/// Goes to the nearest uncovered POI (by straight-line distance from the
/// current position) until the step budget runs out or nothing reachable
/// remains uncovered.
#[allow(clippy::too_many_arguments)]
fn myopic_episode(
    config: &RunConfig,
    world: &World,
    ctx: &SeedContext,
    start: &State,
    pois: &[Vec<f64>],
    budget: usize,
    dseed: u64,
    timings: &mut Timings,
) -> Result<Trace> {
    let ic = &config.inspection;
    let dt = config.dataset.gen.dynamics.dt;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut parts: Vec<Trace> = Vec::new();
    let mut used = 0usize;
    let mut current = start.clone();
    let mut skipped = vec![false; pois.len()];
    for leg in 0.. {
        let so_far = if parts.is_empty() {
            Trace {
                states: vec![start.clone()],
                actions: Vec::new(),
                dt,
                events: Vec::new(),
            }
        } else {
            concat_traces(parts.clone())
        };
        let covered: Vec<bool> = pois
            .iter()
            .map(|p| so_far.states.iter().any(|s| dist(&s.position, p) <= ic.r_obs))
            .collect();
        let target = (0..pois.len())
            .filter(|&i| !covered[i] && !skipped[i])
            .min_by(|&a, &b| {
                dist(&current.position, &pois[a])
                    .total_cmp(&dist(&current.position, &pois[b]))
                    .then(a.cmp(&b))
            });
        let Some(target) = target else { break };
        if used >= budget {
            break;
        }
        let t0 = Instant::now();
        let (g, s) = ctx.graph.with_vertex(&current)?;
        let sets = assign_viewpoints(&g, &pois[target..=target], ic.k_viewpoints, ic.r_obs)?;
        let (dists, _) = crate::planners::dijkstra(&g, s);
        let best = sets[0]
            .iter()
            .copied()
            .filter(|&v| dists[v].is_finite())
            .min_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        let Some(v) = best else {
            skipped[target] = true;
            continue;
        };
        let path = shortest_path(&g, s, v)?;
        let plan = downsample_waypoints(
            &path,
            &g,
            config.planner.delta_t,
            config.planner.dilation,
            ctx.prior.dt_plan,
        )?;
        timings.add("search", t0.elapsed());
        let reference = if plan.m() == 0 {
            // already at the viewpoint but outside r_obs of the POI
            skipped[target] = true;
            continue;
        } else {
            let t0 = Instant::now();
            let traj = denoise_plan(&plan, &ctx.prior, &config.denoiser, seed::derive_seed(dseed, "leg", leg))?;
            timings.add("denoise", t0.elapsed());
            traj.control_reference(config.denoiser.stride)
        };
        let t0 = Instant::now();
        let steps = (reference.len() - 1).min(budget - used).max(1);
        let trace = execute(config, world, &reference, steps)?;
        timings.add("rollout", t0.elapsed());
        used += trace.actions.len();
        let stop = trace.terminated_by_collision() || trace.actions.is_empty();
        current = trace.states.last().unwrap().clone();
        parts.push(trace);
        if stop {
            break;
        }
    }
    if parts.is_empty() {
        return Ok(Trace {
            states: vec![start.clone()],
            actions: Vec::new(),
            dt,
            events: Vec::new(),
        });
    }
    Ok(concat_traces(parts))
}

/// Tour-guided inspection against the myopic baseline for `n_pois` POIs,
/// `config.inspection.starts` starts per seed.
pub fn run_inspection(config: &RunConfig, n_pois: usize) -> Result<EvalReport> {
    config.validate()?;
    if n_pois == 0 {
        return Err(Error::invalid("at least one POI required"));
    }
    let world = config.world.build()?;
    let ic = &config.inspection;
    let mut timings = Timings::default();
    let mut episodes = Vec::new();
    let mut curves = Vec::new();
    for &s in &ic.seeds {
        let ctx = prepare(config, &world, s, &mut timings)?;
        let root = seed::derive_seed(config.seed, "inspection", s);
        let pois = place_pois(&world, n_pois, ic.poi_grid, ic.poi_band, &mut seed::rng(root, "pois", n_pois as u64))?;
        let out: Vec<Vec<(EpisodeRecord, Option<CoverageRecord>, Timings)>> = (0..ic.starts)
            .into_par_iter()
            .map(|si| {
                let mut tm = Timings::default();
                // Starts are the positions of random dataset states, at rest.
                let start = match sample_states(&ctx.dataset, 1, seed::derive_seed(root, "start", si as u64)) {
                    Ok(sampled) => State::at_rest(sampled.states[0].position.clone()),
                    Err(e) => {
                        return vec![
                            (EpisodeRecord::new(s, si, 0, "tour").fail(&e), None, Timings::default()),
                            (EpisodeRecord::new(s, si, 0, "myopic").fail(&e), None, Timings::default()),
                        ];
                    }
                };
                let dseed = seed::derive_seed(root, "denoise", si as u64);
                let mut rows = Vec::new();
                let mut tour_rec = EpisodeRecord::new(s, si, 0, "tour");
                let outcome = tour_episode(config, &world, &ctx, &start, &pois, &mut tour_rec, dseed, &mut tm);
                let budget = match &outcome {
                    Ok(o) => o.budget,
                    Err(_) => 0,
                };
                let traces = [
                    ("tour", outcome.map(|o| o.trace)),
                    (
                        "myopic",
                        myopic_episode(
                            config,
                            &world,
                            &ctx,
                            &start,
                            &pois,
                            budget,
                            seed::derive_seed(dseed, "myopic", 0),
                            &mut tm,
                        ),
                    ),
                ];
                for (label, trace) in traces {
                    let mut rec = if label == "tour" {
                        tour_rec.clone()
                    } else {
                        EpisodeRecord::new(s, si, 0, label)
                    };
                    let trace = match trace {
                        Ok(t) => t,
                        Err(e) => {
                            rows.push((rec.fail(&e), None, Timings::default()));
                            continue;
                        }
                    };
                    let curve = match coverage_curve(&trace, &pois, ic.r_obs) {
                        Ok(c) => c,
                        Err(e) => {
                            rows.push((rec.fail(&e), None, Timings::default()));
                            continue;
                        }
                    };
                    let last = curve.last().map(|c| c.1).unwrap_or(0.0);
                    rec.final_coverage = Some(last);
                    rec.success = last >= 1.0;
                    rec.rollout_steps = trace.actions.len();
                    rec.collided = trace.terminated_by_collision();
                    let cov = CoverageRecord {
                        seed: s,
                        start: si,
                        mode: label.to_string(),
                        curve: sample_curve(&curve, 0.5),
                    };
                    rows.push((rec, Some(cov), Timings::default()));
                }
                rows[0].2 = tm;
                rows
            })
            .collect();
        for rows in out {
            for (r, c, tm) in rows {
                timings.merge(&tm);
                episodes.push(r);
                curves.extend(c);
            }
        }
    }
    let mut report = EvalReport::new("inspection", config, episodes, timings);
    report.coverage_curves = curves;
    for label in ["tour", "myopic"] {
        report.summarize_coverage(&ic.seeds, label);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// `graph` or `delta_t`.
    pub sweep: String,
    pub n: usize,
    pub k: usize,
    pub alpha: Option<f64>,
    pub delta_t: f64,
    /// Largest-component fraction, averaged over seeds.
    pub largest_component: f64,
    pub success_mean: f64,
    pub success_std: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub points: Vec<GridPoint>,
    /// Largest-component fraction over the alpha grid at the largest k.
    pub alpha_components: Vec<(f64, f64)>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn sweep(&self, name: &str) -> Vec<&GridPoint> {
        self.points.iter().filter(|p| p.sweep == name).collect()
    }
}

fn guided_point(
    base: &RunConfig,
    world: &World,
    datasets: &[(u64, Dataset, TemporalEmbedding, LocalPrior)],
    graph: &GraphConfig,
    delta_t: f64,
    sweep: &str,
) -> Result<GridPoint> {
    let mut config = base.clone();
    config.graph = graph.clone();
    config.planner.delta_t = delta_t;
    config.eval.episodes = base.ablation.episodes;
    config.eval.seeds = base.ablation.seeds.clone();
    config.eval.modes = vec![GoalMode::Guided];
    let mut timings = Timings::default();
    let mut episodes = Vec::new();
    let mut lcc = Vec::new();
    for (s, ds, emb, prior) in datasets {
        let t0 = Instant::now();
        let g = graph_from_dataset(graph, ds, emb, seed::derive_seed(config.seed, "graph", *s))?;
        timings.add("graph_build", t0.elapsed());
        lcc.push(g.largest_component_fraction());
        let ctx = SeedContext {
            dataset: ds.clone(),
            embedding: emb.clone(),
            graph: g,
            prior: *prior,
        };
        episodes.extend(goal_episodes(&config, world, &ctx, *s, &[GoalMode::Guided], &mut timings));
    }
    let mut report = EvalReport::new("goal_reaching", &config, episodes, timings);
    report.summarize_success(&config.eval.seeds, GoalMode::Guided.label(), None);
    let sm = report.summaries[0].clone();
    Ok(GridPoint {
        sweep: sweep.to_string(),
        n: graph.n,
        k: graph.k,
        alpha: graph.alpha,
        delta_t,
        largest_component: mean_std(&lcc).0,
        success_mean: sm.mean,
        success_std: sm.std,
        report,
    })
}

/// Guided success and connectivity over the `(N, k)` grid at the configured
/// `delta_t`, then over the `delta_t` grid at the configured graph.
/// Datasets are shared across grid points for each seed.
pub fn run_ablation_grid(config: &RunConfig) -> Result<AblationReport> {
    config.validate()?;
    let world = config.world.build()?;
    let ab = &config.ablation;
    let mut timings = Timings::default();
    let datasets = ab
        .seeds
        .iter()
        .map(|&s| {
            let ds = generate_dataset(config, &world, seed::derive_seed(config.seed, "dataset", s))?;
            let emb = fit_embedding(config, &ds, seed::derive_seed(config.seed, "embedding", s))?;
            let prior = LocalPrior::fit(&ds, config.denoiser.stride)?;
            Ok((s, ds, emb, prior))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for &n in &ab.n_grid {
        for &k in &ab.k_grid {
            let g = GraphConfig { n, k, ..config.graph.clone() };
            let p = guided_point(config, &world, &datasets, &g, config.planner.delta_t, "graph")?;
            log::info!("ablation N={n} k={k}: lcc={:.3} success={:.1}", p.largest_component, p.success_mean);
            timings.merge(&p.report.timings);
            points.push(p);
        }
    }
    for &dt in &ab.delta_t_grid {
        let p = guided_point(config, &world, &datasets, &config.graph, dt, "delta_t")?;
        log::info!("ablation delta_t={dt}: success={:.1}", p.success_mean);
        timings.merge(&p.report.timings);
        points.push(p);
    }
    let k_max = ab.k_grid.iter().copied().max().unwrap_or(config.graph.k);
    let alpha_components = ab
        .alpha_grid
        .iter()
        .map(|&a| {
            let g = GraphConfig {
                k: k_max,
                alpha: Some(a),
                ..config.graph.clone()
            };
            let fr: Vec<f64> = datasets
                .iter()
                .map(|(s, ds, emb, _)| {
                    graph_from_dataset(&g, ds, emb, seed::derive_seed(config.seed, "graph", *s))
                        .map(|g| g.largest_component_fraction())
                })
                .collect::<Result<_>>()?;
            Ok((a, mean_std(&fr).0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        config_hash: config.hash(),
        points,
        alpha_components,
    })
}
