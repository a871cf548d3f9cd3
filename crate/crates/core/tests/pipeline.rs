use xplan_core::pipeline::{
    run_goal_reaching, run_inspection, run_mapf, EvalReport, GoalTask, RunConfig, WorldConfig,
};

fn small_goal_config() -> RunConfig {
    let mut c = RunConfig::goal_reaching();
    c.dataset.count = 200;
    c.graph.n = 400;
    c.eval.seeds = vec![0];
    c.eval.episodes = 2;
    c
}

fn success(r: &EvalReport, mode: &str) -> f64 {
    r.summary(mode, None).unwrap().mean
}

#[test]
fn adjacent_cells_succeed_in_every_mode() {
    let mut c = small_goal_config();
    c.eval.tasks = vec![GoalTask {
        start: vec![1.5, 1.5],
        goal: vec![2.5, 1.5],
    }];
    c.eval.long_tasks = vec![];
    c.eval.jitter = 0.0;
    let r = run_goal_reaching(&c).unwrap();
    for mode in ["guided", "unguided", "graph_only"] {
        assert_eq!(success(&r, mode), 100.0, "{mode}");
    }
}

#[test]
fn sealed_maze_reports_no_path() {
    let mut c = small_goal_config();
    c.world = WorldConfig::fixture("sealed_maze");
    c.eval.tasks = vec![GoalTask {
        start: vec![1.5, 10.5],
        goal: vec![6.5, 1.5],
    }];
    c.eval.long_tasks = vec![];
    let r = run_goal_reaching(&c).unwrap();
    assert_eq!(success(&r, "guided"), 0.0);
    assert_eq!(success(&r, "graph_only"), 0.0);
    for e in r.episodes.iter().filter(|e| e.mode != "unguided") {
        let msg = e.error.as_deref().expect("search must fail");
        assert!(msg.starts_with("no path"), "{msg}");
    }
}

#[test]
fn single_agent_needs_no_reservations() {
    let mut c = RunConfig::mapf();
    c.mapf.episodes = 3;
    c.mapf.seeds = vec![0];
    let r = run_mapf(&c, 1).unwrap();
    assert_eq!(success(&r, "naive"), success(&r, "prioritized"));
    let by_mode = |m: &str| {
        r.episodes
            .iter()
            .filter(|e| e.mode == m)
            .map(|e| (e.success, e.rollout_steps))
            .collect::<Vec<_>>()
    };
    assert_eq!(by_mode("naive"), by_mode("prioritized"));
}

#[test]
fn inspection_curves_end_at_final_coverage() {
    let mut c = RunConfig::inspection();
    c.graph.n = 1500;
    c.inspection.seeds = vec![0];
    c.inspection.starts = 1;
    let r = run_inspection(&c, 3).unwrap();
    for curve in &r.coverage_curves {
        let e = r
            .episodes
            .iter()
            .find(|e| e.mode == curve.mode && e.task == curve.start)
            .unwrap();
        let last = curve.curve.last().unwrap().1;
        assert!((last - e.final_coverage.unwrap()).abs() < 1e-12);
        assert!(curve.curve.windows(2).all(|w| w[1].1 >= w[0].1));
    }
}

#[test]
fn config_hash_tracks_content() {
    let a = RunConfig::goal_reaching();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.set_path("graph.k", "7").unwrap();
    assert_eq!(b.graph.k, 7);
    assert_ne!(a.hash(), b.hash());
    let back = RunConfig::from_json(&b.to_json().unwrap()).unwrap();
    assert_eq!(back.hash(), b.hash());
}

#[test]
fn set_path_rejects_bad_fields_and_values() {
    let mut c = RunConfig::default();
    assert!(c.set_path("graph.kk", "3").is_err());
    assert!(c.set_path("graph.k", "0").is_err());
    assert!(c.set_path("graph.k", "many").is_err());
    assert_eq!(c.graph.k, RunConfig::default().graph.k);
    c.set_path("world.fixture", "corridor").unwrap();
    assert_eq!(c.world.fixture.as_deref(), Some("corridor"));
}

#[test]
fn report_round_trips() {
    let mut c = small_goal_config();
    c.eval.tasks.truncate(1);
    c.eval.long_tasks = vec![0];
    c.eval.episodes = 1;
    let r = run_goal_reaching(&c).unwrap();
    let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
    assert_eq!(back.config_hash, c.hash());
    let csv = r.episodes_csv();
    assert_eq!(csv.lines().count(), r.episodes.len() + 1);
    assert!(csv.lines().next().unwrap().starts_with("seed,task,episode,mode,success"));
}
