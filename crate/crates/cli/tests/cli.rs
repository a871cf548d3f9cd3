use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use xplan_core::pipeline::{episode_endpoints, episode_index, goal_denoise_seed, EvalReport, GoalMode, RunConfig};

fn xplan(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xplan"))
        .args(args)
        .env("XPLAN_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn ok(cache: &Path, args: &[&str]) -> Output {
    let out = xplan(cache, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::goal_reaching();
    c.dataset.count = 150;
    c.graph.n = 400;
    c.eval.seeds = vec![0];
    c.eval.episodes = 1;
    c.eval.tasks.truncate(1);
    c.eval.long_tasks = vec![0];
    c
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn point(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

/// Stages through files: gen-data, build-embedding, build-graph.
fn build_stages(dir: &Path, cache: &Path, cfg: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let emb = dir.join("emb");
    let graph = dir.join("graph");
    ok(cache, &["gen-data", "--config", s(cfg), "--out", s(&data)]);
    ok(cache, &["build-embedding", "--config", s(cfg), "--data", s(&data.join("dataset.jsonl")), "--out", s(&emb)]);
    ok(
        cache,
        &[
            "build-graph",
            "--config",
            s(cfg),
            "--data",
            s(&data.join("dataset.jsonl")),
            "--embedding",
            s(&emb.join("embedding.json")),
            "--out",
            s(&graph),
        ],
    );
    (data.join("dataset.jsonl"), graph.join("graph.json"))
}

#[test]
fn staged_pipeline_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let config = small_config();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config.to_json().unwrap()).unwrap();

    let evald = dir.path().join("eval");
    ok(&cache, &["eval", "--task", "goal", "--config", s(&cfg), "--out", s(&evald)]);
    let report = EvalReport::from_json(&fs::read_to_string(evald.join("report.json")).unwrap()).unwrap();
    assert!(evald.join("manifest.json").is_file() && evald.join("timings.json").is_file());

    let (data, graph) = build_stages(dir.path(), &cache, &cfg);
    let world = config.world.build().unwrap();
    let (start, goal) = episode_endpoints(&config, &world, 0, 0, 0);
    let pland = dir.path().join("plan");
    ok(
        &cache,
        &["plan", "--task", "goal", "--config", s(&cfg), "--graph", s(&graph), "--start", &point(&start.position), "--goal", &point(&goal.position), "--out", s(&pland)],
    );
    let plan = pland.join("plan.json");

    let dseed = goal_denoise_seed(&config, 0, GoalMode::Guided, episode_index(&config, 0, 0)).to_string();
    let dend = dir.path().join("denoise");
    ok(&cache, &["denoise", "--config", s(&cfg), "--data", s(&data), "--plan", s(&plan), "--denoise-seed", &dseed, "--out", s(&dend)]);

    let guided = dir.path().join("rollout_guided");
    ok(&cache, &["rollout", "--config", s(&cfg), "--trajectory", s(&dend.join("trajectory.json")), "--plan", s(&plan), "--out", s(&guided)]);
    let graph_only = dir.path().join("rollout_graph");
    ok(&cache, &["rollout", "--config", s(&cfg), "--plan", s(&plan), "--out", s(&graph_only)]);

    for (mode, out) in [("guided", guided), ("graph_only", graph_only)] {
        let ep = report.episodes.iter().find(|e| e.mode == mode).unwrap();
        let r = json(out.join("rollout.json"));
        assert_eq!(r["success"].as_bool().unwrap(), ep.success, "{mode}");
        assert_eq!(r["steps"].as_u64().unwrap() as usize, ep.rollout_steps, "{mode}");
    }
}

#[test]
fn unreachable_goal_exits_one_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, small_config().to_json().unwrap()).unwrap();
    let (_, graph) = build_stages(dir.path(), &cache, &cfg);
    let out = dir.path().join("plan");
    let o = xplan(&cache, &["plan", "--config", s(&cfg), "--graph", s(&graph), "--start", "1.5,1.5", "--goal", "40,40", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = json(out.join("error.json"));
    assert!(err["error"].as_str().unwrap().contains("no path"));

    let o = xplan(&cache, &["validate", "--graph", s(&graph), "--out", s(&dir.path().join("v"))]);
    assert_eq!(o.status.code(), Some(0));
    let mut g = json(graph.clone());
    let edges = g["edges"].as_array_mut().unwrap();
    let first = edges[0].clone();
    edges.push(first);
    let bad = dir.path().join("bad_graph.json");
    fs::write(&bad, g.to_string()).unwrap();
    let o = xplan(&cache, &["validate", "--graph", s(&bad), "--out", s(&dir.path().join("v2"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = s(dir.path());
    assert_eq!(xplan(&cache, &["gen-data", "--bogus", "--out", out]).status.code(), Some(2));
    assert_eq!(xplan(&cache, &["gen-data", "--graph.kk", "3", "--out", out]).status.code(), Some(2));
    assert_eq!(xplan(&cache, &["gen-data", "--graph.k", "0", "--out", out]).status.code(), Some(2));
    assert_eq!(xplan(&cache, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(xplan(&cache, &["plan", "--graph", "missing.json", "--start", "1,1", "--goal", "2,2", "--out", out]).status.code(), Some(2));
    assert_eq!(xplan(&cache, &["--help"]).status.code(), Some(0));
}

#[test]
fn cache_keys_follow_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, small_config().to_json().unwrap()).unwrap();
    let out = dir.path().join("d");
    let key = |o: &Output| {
        assert!(o.status.success());
        let m = json(out.join("manifest.json"));
        (m["cache_key"].as_str().unwrap().to_string(), m["cache_hit"].as_bool().unwrap())
    };
    let (k1, hit) = key(&xplan(&cache, &["gen-data", "--config", s(&cfg), "--out", s(&out)]));
    assert!(!hit);
    let first = fs::read(out.join("dataset.jsonl")).unwrap();
    let (k2, hit) = key(&xplan(&cache, &["gen-data", "--config", s(&cfg), "--out", s(&out)]));
    assert!(hit && k1 == k2);
    assert_eq!(fs::read(out.join("dataset.jsonl")).unwrap(), first);
    let (k3, hit) = key(&xplan(&cache, &["gen-data", "--config", s(&cfg), "--force", "--out", s(&out)]));
    assert!(!hit && k3 == k1);
    let (k4, _) = key(&xplan(&cache, &["gen-data", "--config", s(&cfg), "--dataset.count", "149", "--out", s(&out)]));
    assert_ne!(k4, k1);
    let m = json(out.join("manifest.json"));
    assert_eq!(m["config"]["dataset"]["count"], 149);
    assert!(m["config_hash"].is_string() && m["versions"]["xplan"].is_string());

    // a changed dataset byte changes every downstream key
    let data = out.join("dataset.jsonl");
    let emb = dir.path().join("e");
    ok(&cache, &["build-embedding", "--config", s(&cfg), "--data", s(&data), "--out", s(&emb)]);
    let before = json(emb.join("manifest.json"))["cache_key"].clone();
    let mut bytes = fs::read(&data).unwrap();
    bytes.push(b'\n');
    fs::write(&data, bytes).unwrap();
    ok(&cache, &["build-embedding", "--config", s(&cfg), "--data", s(&data), "--out", s(&emb)]);
    let after = json(emb.join("manifest.json"));
    assert_ne!(before, after["cache_key"]);
    assert_eq!(after["cache_hit"], false);
}

#[test]
fn unguided_denoise_from_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, small_config().to_json().unwrap()).unwrap();
    let data = dir.path().join("data");
    ok(&cache, &["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out = dir.path().join("u");
    ok(
        &cache,
        &["denoise", "--config", s(&cfg), "--data", s(&data.join("dataset.jsonl")), "--start", "1.5,1.5", "--goal", "3.5,1.5", "--out", s(&out)],
    );
    let diag = json(out.join("diagnostics.json"));
    assert!(diag.is_object());
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.lines().count() > 2);
}
