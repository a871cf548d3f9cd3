//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use xplan_core::denoiser::{
    closed_form_map, energy_gradient, guided_denoise, make_layout, make_schedule, relative_l2,
    triangular_weight, waypoint_energy, FieldWaypoint, GuidanceField, LocalPrior, SampleMode,
    DEFAULT_BETA_MAX, DEFAULT_BETA_MIN,
};
use xplan_core::env::State;
use xplan_core::graph::build_graph;
use xplan_core::pipeline::{
    run_ablation_grid, run_goal_reaching, run_inspection, run_mapf, AblationReport, EvalReport,
    RunConfig,
};
use xplan_core::planners::shortest_path;
use xplan_core::seed::{self, Rng as SeedRng};
use xplan_core::TemporalEmbedding;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_state(rng: &mut SeedRng, d: usize, scale: f64) -> State {
    State {
        position: (0..d).map(|_| rng.random_range(-scale..scale)).collect(),
        velocity: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

fn random_field(rng: &mut SeedRng, h: usize, m: usize, r: f64, gamma: f64, position_only: bool) -> GuidanceField {
    let wps = (0..m)
        .map(|_| FieldWaypoint {
            center: rng.random_range(0..h) as f64,
            target: random_state(rng, 2, 3.0),
        })
        .collect();
    GuidanceField::new(h, r, gamma, position_only, wps).unwrap()
}

fn random_traj(rng: &mut SeedRng, h: usize) -> Vec<State> {
    (0..h).map(|_| random_state(rng, 2, 3.0)).collect()
}

// 1 ------------------------------------------------------------------------

fn guidance_math() -> Outcome {
    let mut worst_w: f64 = 0.0;
    for i in 0..100 {
        for j in 0..100 {
            let t = i as f64 * 0.37 - 5.0;
            let center = j as f64 * 0.29;
            let r = 0.5 + (i * 7 + j) as f64 % 13.0;
            let want = (1.0 - (t - center).abs() / r).max(0.0);
            worst_w = worst_w.max((triangular_weight(t, center, r) - want).abs());
        }
    }
    let mut rng = seed::rng(1, "acceptance-fd", 0);
    let mut worst_g: f64 = 0.0;
    for case in 0..100 {
        let h = rng.random_range(4..30);
        let (m, r, gamma) = (rng.random_range(1..5), rng.random_range(1.0..6.0), rng.random_range(0.1..3.0));
        let field = random_field(&mut rng, h, m, r, gamma, case % 2 == 1);
        let traj = random_traj(&mut rng, h);
        let grad = energy_gradient(&traj, &field).unwrap();
        let eps = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..h {
            for k in 0..4 {
                let mut plus = traj.clone();
                let mut minus = traj.clone();
                let bump = |s: &mut State, by: f64| {
                    if k < 2 {
                        s.position[k] += by
                    } else {
                        s.velocity[k - 2] += by
                    }
                };
                bump(&mut plus[t], eps);
                bump(&mut minus[t], -eps);
                let fd = (waypoint_energy(&plus, &field).unwrap() - waypoint_energy(&minus, &field).unwrap()) / (2.0 * eps);
                let an = if k < 2 { grad[t].position[k] } else { grad[t].velocity[k - 2] };
                num += (fd - an) * (fd - an);
                den += an * an;
            }
        }
        let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        worst_g = worst_g.max(rel);
    }
    outcome(
        worst_w <= 1e-15 && worst_g <= 1e-5,
        format!("window max abs err {worst_w:.1e} on 10^4 points; gradient max rel err {worst_g:.2e} on 100 instances"),
    )
}

// 2 ------------------------------------------------------------------------

fn denoiser_oracle() -> Outcome {
    let schedule = make_schedule(200, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
    let layout = make_layout(40, 24, 8).unwrap();
    let mut rng = seed::rng(2, "acceptance-denoise", 0);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let prior = LocalPrior::new(rng.random_range(20.0..400.0), rng.random_range(20.0..400.0), 0.2).unwrap();
        let gamma = [0.0, 0.5, 1.0, 2.0][case % 4];
        let m = rng.random_range(1..5);
        let field = random_field(&mut rng, 40, m, 8.0, gamma, false);
        let s0 = random_state(&mut rng, 2, 3.0);
        let g0 = random_state(&mut rng, 2, 3.0);
        let want = closed_form_map(&prior, &field, (&s0, &g0), 40).unwrap();
        let got = guided_denoise(&layout, &prior, &field, &schedule, (&s0, &g0), SampleMode::Deterministic, 0).unwrap();
        worst = worst.max(relative_l2(&got.states, &want));
    }
    let det_ok = layout.k == 2 && worst <= 1e-3;

    let n = 500;
    let mut worst_se: f64 = 0.0;
    let mut over = 0usize;
    let mut coords = 0usize;
    for fixture in 0..3u64 {
        let mut rng = seed::rng(2, "acceptance-stochastic", fixture);
        let h = 24;
        let layout = make_layout(h, 16, 4).unwrap();
        let prior = LocalPrior::new(rng.random_range(30.0..120.0), rng.random_range(30.0..120.0), 0.2).unwrap();
        let field = random_field(&mut rng, h, 2, 4.0, 1.0, false);
        let s0 = random_state(&mut rng, 2, 2.0);
        let g0 = random_state(&mut rng, 2, 2.0);
        let want: Vec<f64> = closed_form_map(&prior, &field, (&s0, &g0), h)
            .unwrap()
            .iter()
            .flat_map(State::to_flat)
            .collect();
        let samples: Vec<Vec<f64>> = (0..n as u64)
            .into_par_iter()
            .map(|sd| {
                guided_denoise(&layout, &prior, &field, &schedule, (&s0, &g0), SampleMode::Stochastic, sd)
                    .unwrap()
                    .states
                    .iter()
                    .flat_map(State::to_flat)
                    .collect()
            })
            .collect();
        for (j, &w) in want.iter().enumerate() {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt().max(1e-12);
            let z = (mean - w).abs() / se;
            worst_se = worst_se.max(z);
            coords += 1;
            if z > 3.0 {
                over += 1;
            }
        }
    }
    outcome(
        det_ok && over == 0,
        format!(
            "deterministic max rel L2 {worst:.2e} over 20 fixtures (K=2); stochastic: {over}/{coords} coords beyond 3 SE, worst {worst_se:.2} SE"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn brute_knn_edges(zs: &[Vec<f64>], k: usize, alpha: f64) -> BTreeMap<(usize, usize), f64> {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut edges = BTreeMap::new();
    for i in 0..zs.len() {
        let mut all: Vec<(f64, usize)> = (0..zs.len()).filter(|&j| j != i).map(|j| (d(&zs[i], &zs[j]), j)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(dist, j) in all.iter().take(k) {
            if dist <= alpha {
                edges.insert((i.min(j), i.max(j)), dist);
            }
        }
    }
    edges
}

fn enumerate_paths(adj: &[Vec<(usize, f64)>], at: usize, goal: usize, seen: &mut Vec<bool>, cost: f64, best: &mut f64) {
    if at == goal {
        *best = best.min(cost);
        return;
    }
    for &(v, c) in &adj[at] {
        if !seen[v] {
            seen[v] = true;
            enumerate_paths(adj, v, goal, seen, cost + c, best);
            seen[v] = false;
        }
    }
}

fn graph_correctness() -> Outcome {
    let mut rng = seed::rng(3, "acceptance-graph", 0);
    let emb = TemporalEmbedding::identity(2);
    let mut graph_ok = 0;
    for _ in 0..20 {
        let states: Vec<State> = (0..50).map(|_| State::at_rest(vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)])).collect();
        let k = rng.random_range(1..8);
        let alpha = rng.random_range(0.3..2.0);
        let g = build_graph(&states, &emb, k, Some(alpha)).unwrap();
        let zs: Vec<Vec<f64>> = states.iter().map(|s| s.position.clone()).collect();
        let want = brute_knn_edges(&zs, k, alpha);
        let got: BTreeMap<(usize, usize), f64> = g.edges.iter().map(|e| ((e.i, e.j), e.cost)).collect();
        let same = want.len() == got.len()
            && want.iter().all(|(key, c)| got.get(key).is_some_and(|x| (x - c).abs() <= 1e-12));
        if same {
            graph_ok += 1;
        }
    }
    let mut path_ok = 0;
    for _ in 0..50 {
        let states: Vec<State> = (0..9).map(|_| State::at_rest(vec![rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])).collect();
        let g = build_graph(&states, &emb, 3, Some(rng.random_range(0.8..2.5))).unwrap();
        let (s, t) = (0, 8);
        let mut adj = vec![Vec::new(); 9];
        for e in &g.edges {
            adj[e.i].push((e.j, e.cost));
            adj[e.j].push((e.i, e.cost));
        }
        let mut best = f64::INFINITY;
        let mut seen = vec![false; 9];
        seen[s] = true;
        enumerate_paths(&adj, s, t, &mut seen, 0.0, &mut best);
        let ok = match shortest_path(&g, s, t) {
            Ok(p) => best.is_finite() && (p.total_cost - best).abs() <= 1e-9,
            Err(_) => best.is_infinite(),
        };
        if ok {
            path_ok += 1;
        }
    }
    outcome(
        graph_ok == 20 && path_ok == 50,
        format!("kNN graphs equal to brute force {graph_ok}/20; shortest paths equal to enumeration {path_ok}/50"),
    )
}

// 4 ------------------------------------------------------------------------

fn long_horizon(report: &EvalReport, config: &RunConfig) -> Outcome {
    let get = |m: &str| report.summary(m, None).map(|s| (s.mean, s.std)).unwrap_or((f64::NAN, f64::NAN));
    let (g, gs) = get("guided");
    let (u, us) = get("unguided");
    let (o, os) = get("graph_only");
    let long = &config.eval.long_tasks;
    let lg = report.success_over("guided", long);
    let lu = report.success_over("unguided", long);
    let lo = report.success_over("graph_only", long);
    outcome(
        g >= 85.0 && u <= g - 20.0 && lg >= lo && lo >= lu,
        format!(
            "guided {g:.1}±{gs:.1}, unguided {u:.1}±{us:.1}, graph-only {o:.1}±{os:.1}; long-horizon subset guided {lg:.1} ≥ graph-only {lo:.1} ≥ unguided {lu:.1}"
        ),
    )
}

// 5, 6 ----------------------------------------------------------------------

fn connectivity_threshold(report: &AblationReport) -> Outcome {
    let pts = report.sweep("graph");
    let at = |k: usize| pts.iter().find(|p| p.k == k && p.n == 500);
    let low = pts
        .iter()
        .filter(|p| p.n == 500 && p.k <= 5 && p.largest_component < 0.5 && p.success_mean < 20.0)
        .map(|p| p.k)
        .max();
    let high = pts
        .iter()
        .filter(|p| p.n == 500 && p.k <= 30 && p.success_mean >= 80.0)
        .filter(|p| at(2 * p.k).is_some_and(|q| (q.success_mean - p.success_mean).abs() <= 5.0))
        .map(|p| p.k)
        .min();
    let table: Vec<String> = pts
        .iter()
        .map(|p| format!("k={}:{:.2}/{:.0}", p.k, p.largest_component, p.success_mean))
        .collect();
    let lcc_monotone = pts.windows(2).all(|w| w[1].largest_component >= w[0].largest_component - 1e-12)
        && report.alpha_components.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12);
    outcome(
        low.is_some() && high.is_some() && lcc_monotone,
        format!(
            "k_low={low:?} k_high={high:?}; component fraction monotone in k and alpha: {lcc_monotone}; [lcc/success] {}",
            table.join(" ")
        ),
    )
}

fn delta_t_sensitivity(report: &AblationReport) -> Outcome {
    let pts = report.sweep("delta_t");
    let s: Vec<f64> = pts.iter().map(|p| p.success_mean).collect();
    let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = s.iter().copied().fold(f64::INFINITY, f64::min);
    let argmax: Vec<usize> = (0..s.len()).filter(|&i| s[i] == best).collect();
    let interior = argmax.iter().any(|&i| i > 0 && i + 1 < s.len());
    let dts: Vec<f64> = pts.iter().map(|p| p.delta_t).collect();
    let spans = dts.len() == 4 && (dts[3] - 4.0 * dts[0]).abs() < 1e-12;
    outcome(
        spans && interior && best - worst <= 10.0,
        format!("grid {dts:?} success {s:?}; best at interior: {interior}; spread {:.1}", best - worst),
    )
}

// 7 ------------------------------------------------------------------------

fn mapf_trend(config: &RunConfig) -> Outcome {
    let delta = config.mapf.delta;
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [2, 3, 4] {
        let r = run_mapf(config, n).unwrap();
        let solved: Vec<_> = r.episodes.iter().filter(|e| e.mode == "prioritized" && e.error.is_none()).collect();
        let plans_ok = solved.iter().all(|e| e.plan_separation.is_some_and(|s| s >= delta));
        let p = r.summary("prioritized", None).unwrap();
        let q = r.summary("naive", None).unwrap();
        ok &= plans_ok;
        if n == 2 {
            ok &= p.mean - q.mean >= 25.0;
        }
        if n == 4 {
            ok &= q.mean <= 10.0 && p.mean > 0.0;
        }
        lines.push(format!(
            "n={n}: prioritized {:.1}±{:.1} naive {:.1}±{:.1}, plan separation ≥ δ in {}/{} solved",
            p.mean,
            p.std,
            q.mean,
            q.std,
            solved.iter().filter(|e| e.plan_separation.is_some_and(|s| s >= delta)).count(),
            solved.len()
        ));
    }
    outcome(ok, lines.join("; "))
}

// 8 ------------------------------------------------------------------------

fn inspection_trend(config: &RunConfig) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for n in [4, 8, 16] {
        let r = run_inspection(config, n).unwrap();
        let tour = r.summary("tour", None).unwrap();
        let myo = r.summary("myopic", None).unwrap();
        let monotone = r
            .coverage_curves
            .iter()
            .all(|c| c.curve.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].0 >= w[0].0));
        ok &= monotone;
        if n >= 8 {
            ok &= tour.mean >= 90.0;
        }
        let mut ratio_note = String::new();
        if n == 4 {
            let ratios: Vec<f64> = r
                .episodes
                .iter()
                .filter(|e| e.mode == "tour")
                .filter_map(|e| Some(e.path_cost? / e.optimal_cost?.max(1e-12)))
                .collect();
            let instances = r.episodes.iter().filter(|e| e.mode == "tour").count();
            let worst = ratios.iter().copied().fold(0.0, f64::max);
            ok &= ratios.len() == instances && worst <= 1.15;
            ratio_note = format!(", greedy/optimal worst {worst:.3} over {}/{instances} instances", ratios.len());
        }
        lines.push(format!(
            "n={n}: tour {:.1}±{:.1}% myopic {:.1}±{:.1}%, curves monotone {monotone}{ratio_note}",
            tour.mean, tour.std, myo.mean, myo.std
        ));
    }
    outcome(ok, lines.join("; "))
}

// 9 ------------------------------------------------------------------------

fn determinism(goal: &EvalReport, goal_config: &RunConfig) -> Outcome {
    let again = run_goal_reaching(goal_config).unwrap();
    let same_goal = goal.to_json().unwrap() == again.to_json().unwrap();
    let mc = RunConfig::mapf();
    let a = run_mapf(&mc, 2).unwrap().to_json().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| run_mapf(&mc, 2).unwrap().to_json().unwrap());
    let ic = RunConfig::inspection();
    let c = run_inspection(&ic, 4).unwrap().to_json().unwrap();
    let d = run_inspection(&ic, 4).unwrap().to_json().unwrap();
    outcome(
        same_goal && a == b && c == d,
        format!("goal reaching rerun identical: {same_goal}; MAPF 1 vs 3 threads identical: {}; inspection rerun identical: {}", a == b, c == d),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, elapsed: Duration, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {id} [{tag}] {name} ({:.1}s): {}", elapsed.as_secs_f64(), o.detail);
    };

    let t = Instant::now();
    let o = guidance_math();
    report(1, "guidance math exactness", t.elapsed(), o);

    let t = Instant::now();
    let o = denoiser_oracle();
    report(2, "denoiser oracle equivalence", t.elapsed(), o);

    let t = Instant::now();
    let o = graph_correctness();
    report(3, "graph correctness", t.elapsed(), o);

    let goal_config = RunConfig::goal_reaching();
    let t = Instant::now();
    let goal = run_goal_reaching(&goal_config).unwrap();
    let o = long_horizon(&goal, &goal_config);
    report(4, "long-horizon trend", t.elapsed(), o);

    let mut ab_config = RunConfig::goal_reaching();
    ab_config.graph.n = 500;
    let t = Instant::now();
    let ab = run_ablation_grid(&ab_config).unwrap();
    let elapsed = t.elapsed();
    report(5, "connectivity threshold", elapsed, connectivity_threshold(&ab));
    report(6, "delta_t sensitivity", elapsed, delta_t_sensitivity(&ab));

    let t = Instant::now();
    let o = mapf_trend(&RunConfig::mapf());
    report(7, "multi-agent trend", t.elapsed(), o);

    let t = Instant::now();
    let o = inspection_trend(&RunConfig::inspection());
    report(8, "inspection trend", t.elapsed(), o);

    let t = Instant::now();
    let o = determinism(&goal, &goal_config);
    report(9, "determinism", t.elapsed(), o);

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
