use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use xplan_core::dataset::{load_dataset, save_dataset, FORMAT_VERSION as DATASET_VERSION};
use xplan_core::env::{goal_reached, State};
use xplan_core::graph::GRAPH_VERSION;
use xplan_core::pipeline::{
    denoise_field, denoise_plan, execute, fit_embedding, generate_dataset, graph_from_dataset,
    linear_reference, plan_goal, run_ablation_grid, run_goal_reaching, run_inspection, run_mapf,
    time_limit_steps, unguided_field, RunConfig, Timings,
};
use xplan_core::seed::derive_seed;
use xplan_core::{ConnectivityGraph, GuidedTrajectory, LocalPrior, TemporalEmbedding, WaypointPlan};

use crate::args::{Command, Common, EvalTask};
use crate::cache;

/// Bad invocation: exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Domain-level failure outside the core error type (invalid artifacts).
#[derive(Debug)]
pub struct Domain(pub String);

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Domain {}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    config_hash: String,
    config: &'a RunConfig,
    params: &'a Value,
    inputs: BTreeMap<String, Input>,
    outputs: &'a [&'a str],
    cache_key: &'a str,
    cache_hit: bool,
    versions: BTreeMap<&'static str, String>,
    timings: &'a Timings,
}

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

pub struct Run {
    name: &'static str,
    argv: Vec<String>,
    pub config: RunConfig,
    pub out: PathBuf,
    force: bool,
    params: Value,
    inputs: BTreeMap<String, Input>,
    pub timings: Timings,
}

fn default_config(cmd: &Command) -> RunConfig {
    match cmd {
        Command::Eval { task: EvalTask::Mapf, .. } => RunConfig::mapf(),
        Command::Eval { task: EvalTask::Inspection, .. } => RunConfig::inspection(),
        _ => RunConfig::goal_reaching(),
    }
}

pub fn load_config(cmd: &Command, overrides: &[(String, String)]) -> Result<RunConfig> {
    let common = cmd.common();
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Usage(format!("reading {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?
        }
        None => default_config(cmd),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    for (path, value) in overrides {
        config.set_path(path, value).map_err(|e| Usage(e.to_string()))?;
    }
    Ok(config)
}

impl Run {
    pub fn new(cmd: &Command, argv: Vec<String>, config: RunConfig, params: Value) -> Result<Self> {
        let Common { out, force, .. } = cmd.common().clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            name: cmd.name(),
            argv,
            config,
            out,
            force,
            params,
            inputs: BTreeMap::new(),
            timings: Timings::default(),
        })
    }

    /// Records an input file (content hash) and returns its path.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Usage(format!("--{label}: no such file {}", path.display())).into());
        }
        self.inputs.insert(
            label.to_string(),
            Input {
                path: path.display().to_string(),
                sha256: cache::file_hash(path)?,
            },
        );
        Ok(path.to_path_buf())
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn key(&self) -> String {
        let hashes = self.inputs.iter().map(|(k, v)| (k.clone(), v.sha256.clone())).collect();
        cache::cache_key(self.name, &self.config.hash(), &self.params, &hashes)
    }

    /// Runs `body` unless the cache already holds `outputs` for this stage,
    /// then writes the manifest and timings sidecar.
    pub fn cached(mut self, outputs: &[&str], body: impl FnOnce(&mut Run) -> Result<()>) -> Result<()> {
        let key = self.key();
        let root = cache::cache_root(&self.out);
        let hit = !self.force && cache::restore(&root, &key, outputs, &self.out)?;
        if hit {
            log::info!("{}: cache hit {key}", self.name);
        } else {
            body(&mut self)?;
            cache::store(&root, &key, outputs, &self.out)?;
        }
        self.finish(outputs, &key, hit)
    }

    fn finish(self, outputs: &[&str], key: &str, hit: bool) -> Result<()> {
        let versions = BTreeMap::from([
            ("xplan", env!("CARGO_PKG_VERSION").to_string()),
            ("dataset_format", DATASET_VERSION.to_string()),
            ("graph_format", GRAPH_VERSION.to_string()),
        ]);
        let manifest = Manifest {
            command: self.name,
            argv: &self.argv,
            config_hash: self.config.hash(),
            config: &self.config,
            params: &self.params,
            inputs: self.inputs,
            outputs,
            cache_key: key,
            cache_hit: hit,
            versions,
            timings: &self.timings,
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        let path = self.out.join("timings.json");
        fs::write(&path, serde_json::to_string_pretty(&self.timings)?).with_context(|| format!("writing {}", path.display()))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn dt_plan(config: &RunConfig) -> f64 {
    config.dataset.gen.dynamics.dt * config.denoiser.stride as f64
}

fn check_dim(what: &str, p: &[f64], d: usize) -> Result<()> {
    if p.len() != d {
        return Err(Usage(format!("--{what} has {} coordinates, the world is {d}-D", p.len())).into());
    }
    Ok(())
}

pub fn dispatch(cmd: &Command, argv: Vec<String>, overrides: &[(String, String)]) -> Result<()> {
    let config = load_config(cmd, overrides)?;
    if let Some(n) = cmd.common().jobs {
        if n == 0 {
            return Err(Usage("--jobs must be at least 1".into()).into());
        }
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cmd {
        Command::GenData { eval_seed, .. } => {
            let run = Run::new(cmd, argv, config, json!({ "eval_seed": eval_seed }))?;
            run.cached(&["dataset.jsonl"], |run| {
                let t0 = Instant::now();
                let world = run.config.world.build()?;
                let seed = derive_seed(run.config.seed, "dataset", *eval_seed);
                let ds = generate_dataset(&run.config, &world, seed)?;
                save_dataset(&ds, &run.out.join("dataset.jsonl"))?;
                run.timings.add("dataset", t0.elapsed());
                Ok(())
            })
        }
        Command::BuildEmbedding { data, eval_seed, .. } => {
            let mut run = Run::new(cmd, argv, config, json!({ "eval_seed": eval_seed }))?;
            let data = run.input("data", data)?;
            run.cached(&["embedding.json"], |run| {
                let t0 = Instant::now();
                let ds = load_dataset(&data)?;
                let seed = derive_seed(run.config.seed, "embedding", *eval_seed);
                let emb = fit_embedding(&run.config, &ds, seed)?;
                run.write("embedding.json", &emb.to_json()?)?;
                run.timings.add("embedding", t0.elapsed());
                Ok(())
            })
        }
        Command::BuildGraph {
            data,
            embedding,
            eval_seed,
            ..
        } => {
            let mut run = Run::new(cmd, argv, config, json!({ "eval_seed": eval_seed }))?;
            let data = run.input("data", data)?;
            let embedding = run.input("embedding", embedding)?;
            run.cached(&["graph.json"], |run| {
                let t0 = Instant::now();
                let ds = load_dataset(&data)?;
                let emb = TemporalEmbedding::from_json(&read(&embedding)?)?;
                let seed = derive_seed(run.config.seed, "graph", *eval_seed);
                let g = graph_from_dataset(&run.config.graph, &ds, &emb, seed)?;
                run.write("graph.json", &g.to_json()?)?;
                run.timings.add("graph_build", t0.elapsed());
                Ok(())
            })
        }
        Command::Plan {
            task,
            graph,
            start,
            goal,
            ..
        } => {
            let params = json!({ "task": format!("{task:?}").to_lowercase(), "start": start.0, "goal": goal.0 });
            let mut run = Run::new(cmd, argv, config, params)?;
            let graph = run.input("graph", graph)?;
            run.cached(&["plan.json"], |run| {
                let t0 = Instant::now();
                let g = ConnectivityGraph::from_json(&read(&graph)?)?;
                let d = g.vertices.first().map(|v| v.state.dim()).unwrap_or(0);
                check_dim("start", &start.0, d)?;
                check_dim("goal", &goal.0, d)?;
                let s = State::at_rest(start.0.clone());
                let e = State::at_rest(goal.0.clone());
                let plan = plan_goal(&g, &s, &e, &run.config.planner, dt_plan(&run.config))?;
                run.write("plan.json", &plan.to_json()?)?;
                run.timings.add("search", t0.elapsed());
                Ok(())
            })
        }
        Command::Denoise {
            data,
            plan,
            start,
            goal,
            denoise_seed,
            ..
        } => {
            if plan.is_none() && start.is_none() {
                return Err(Usage("denoise needs --plan or --start/--goal".into()).into());
            }
            let seed = denoise_seed.unwrap_or_else(|| derive_seed(config.seed, "denoise", 0));
            let params = json!({
                "start": start.as_ref().map(|p| &p.0),
                "goal": goal.as_ref().map(|p| &p.0),
                "denoise_seed": seed,
            });
            let mut run = Run::new(cmd, argv, config, params)?;
            let data = run.input("data", data)?;
            let plan = plan.as_ref().map(|p| run.input("plan", p)).transpose()?;
            let outputs = ["trajectory.json", "trajectory.csv", "diagnostics.json"];
            run.cached(&outputs, |run| {
                let t0 = Instant::now();
                let ds = load_dataset(&data)?;
                let prior = LocalPrior::fit(&ds, run.config.denoiser.stride)?;
                let traj = match &plan {
                    Some(p) => {
                        let plan = WaypointPlan::from_json(&read(p)?)?;
                        denoise_plan(&plan, &prior, &run.config.denoiser, seed)?
                    }
                    None => {
                        let (s, g) = (start.clone().unwrap().0, goal.clone().unwrap().0);
                        check_dim("start", &s, ds.d)?;
                        check_dim("goal", &g, ds.d)?;
                        let (s, g) = (State::at_rest(s), State::at_rest(g));
                        let field = unguided_field(&run.config.planner, &s, &g, prior.dt_plan);
                        denoise_field(&field, &prior, &run.config.denoiser, (&s, &g), seed)?
                    }
                };
                run.write("trajectory.json", &serde_json::to_string(&traj)?)?;
                run.write("trajectory.csv", &traj.to_csv())?;
                run.write("diagnostics.json", &traj.diagnostics_json()?)?;
                run.timings.add("denoise", t0.elapsed());
                Ok(())
            })
        }
        Command::Rollout {
            trajectory,
            plan,
            goal,
            max_steps,
            ..
        } => {
            if trajectory.is_none() && plan.is_none() {
                return Err(Usage("rollout needs --trajectory and/or --plan".into()).into());
            }
            let params = json!({ "goal": goal.as_ref().map(|p| &p.0), "max_steps": max_steps });
            let mut run = Run::new(cmd, argv, config, params)?;
            let trajectory = trajectory.as_ref().map(|p| run.input("trajectory", p)).transpose()?;
            let plan = plan.as_ref().map(|p| run.input("plan", p)).transpose()?;
            run.cached(&["trace.csv", "rollout.json"], |run| {
                let t0 = Instant::now();
                let config = &run.config;
                let world = config.world.build()?;
                let dt = config.dataset.gen.dynamics.dt;
                let traj: Option<GuidedTrajectory> = trajectory
                    .as_ref()
                    .map(|p| serde_json::from_str(&read(p)?).context("parsing trajectory"))
                    .transpose()?;
                let plan = plan.as_ref().map(|p| -> Result<WaypointPlan> { Ok(WaypointPlan::from_json(&read(p)?)?) }).transpose()?;
                let reference = match (&traj, &plan) {
                    (Some(t), _) => t.control_reference(config.denoiser.stride),
                    (None, Some(p)) => linear_reference(p, dt),
                    (None, None) => unreachable!(),
                };
                let duration = match (&plan, &traj) {
                    (Some(p), _) => p.duration(),
                    (None, Some(t)) => (t.states.len() - 1) as f64 * dt_plan(config),
                    (None, None) => unreachable!(),
                };
                let steps = max_steps.unwrap_or_else(|| time_limit_steps(duration, config.eval.time_limit_factor, dt));
                let target = match (goal, &plan, &traj) {
                    (Some(g), _, _) => g.0.clone(),
                    (None, Some(p), _) => p.waypoints[p.m()].state.position.clone(),
                    (None, None, Some(t)) => t.states.last().unwrap().position.clone(),
                    _ => unreachable!(),
                };
                check_dim("goal", &target, world.dim())?;
                let trace = execute(config, &world, &reference, steps)?;
                let success = goal_reached(&trace, &target, config.eval.goal_radius)?;
                let summary = json!({
                    "success": success,
                    "steps": trace.actions.len(),
                    "max_steps": steps,
                    "collided": trace.terminated_by_collision(),
                    "goal": target,
                });
                run.write("trace.csv", &trace.to_csv())?;
                run.write("rollout.json", &serde_json::to_string_pretty(&summary)?)?;
                run.timings.add("rollout", t0.elapsed());
                Ok(())
            })
        }
        Command::Eval { task, agents, pois, .. } => {
            let params = match task {
                EvalTask::Goal => json!({ "task": "goal" }),
                EvalTask::Mapf => json!({ "task": "mapf", "agents": agents }),
                EvalTask::Inspection => json!({ "task": "inspection", "pois": pois }),
            };
            let run = Run::new(cmd, argv, config, params)?;
            let mut outputs = vec!["report.json", "episodes.csv"];
            if *task == EvalTask::Inspection {
                outputs.push("coverage.csv");
            }
            run.cached(&outputs, |run| {
                let report = match task {
                    EvalTask::Goal => run_goal_reaching(&run.config)?,
                    EvalTask::Mapf => run_mapf(&run.config, *agents)?,
                    EvalTask::Inspection => run_inspection(&run.config, *pois)?,
                };
                run.write("report.json", &report.to_json()?)?;
                run.write("episodes.csv", &report.episodes_csv())?;
                if *task == EvalTask::Inspection {
                    run.write("coverage.csv", &report.coverage_csv())?;
                }
                for s in report.summaries.iter().filter(|s| s.task.is_none()) {
                    println!("{} {}: {:.1} ± {:.1}", s.mode, s.metric, s.mean, s.std);
                }
                run.timings = report.timings.clone();
                Ok(())
            })
        }
        Command::Ablate { .. } => {
            let run = Run::new(cmd, argv, config, json!({}))?;
            run.cached(&["ablation.json"], |run| {
                let t0 = Instant::now();
                let report = run_ablation_grid(&run.config)?;
                run.write("ablation.json", &report.to_json()?)?;
                run.timings.add("ablation", t0.elapsed());
                Ok(())
            })
        }
        Command::Validate { graph, data, plan, .. } => validate(cmd, argv, config, graph, data, plan),
    }
}

fn validate(
    cmd: &Command,
    argv: Vec<String>,
    config: RunConfig,
    graph: &Option<PathBuf>,
    data: &Option<PathBuf>,
    plan: &Option<PathBuf>,
) -> Result<()> {
    let mut run = Run::new(cmd, argv, config, json!({}))?;
    let mut problems: Vec<String> = Vec::new();
    if let Err(e) = run.config.validate() {
        problems.push(format!("config: {e}"));
    }
    if let Some(p) = graph {
        let p = run.input("graph", p)?;
        match ConnectivityGraph::from_json(&read(&p)?) {
            Ok(g) => problems.extend(g.validate().into_iter().map(|v| format!("graph: {v}"))),
            Err(e) => problems.push(format!("graph: {e}")),
        }
    }
    if let Some(p) = data {
        let p = run.input("data", p)?;
        if let Err(e) = load_dataset(&p) {
            problems.push(format!("dataset: {e}"));
        }
    }
    if let Some(p) = plan {
        let p = run.input("plan", p)?;
        if let Err(e) = WaypointPlan::from_json(&read(&p)?) {
            problems.push(format!("plan: {e}"));
        }
    }
    run.write("validation.json", &serde_json::to_string_pretty(&json!({ "ok": problems.is_empty(), "problems": problems }))?)?;
    run.finish(&["validation.json"], "", false)?;
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(Domain(format!("{} problem(s) found", problems.len())).into())
    }
}
