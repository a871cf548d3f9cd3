use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use xplan_bench::maze_fixture;
use xplan_core::dataset::{sample_states, Lattice};
use xplan_core::graph::build_graph;
use xplan_core::pipeline::denoise_plan;
use xplan_core::planners::shortest_path;

fn benches(c: &mut Criterion) {
    let fx = maze_fixture();

    let mut group = c.benchmark_group("build_graph");
    group.sample_size(10);
    for n in [250, 500, 1000] {
        let states = sample_states(&fx.dataset, n, 3).unwrap().states;
        group.bench_with_input(BenchmarkId::from_parameter(n), &states, |b, s| {
            b.iter(|| build_graph(black_box(s), &fx.embedding, 20, Some(1.0)).unwrap())
        });
    }
    group.finish();

    let (g, s) = fx.graph.with_vertex(&fx.endpoints.0).unwrap();
    let (g, t) = g.with_vertex(&fx.endpoints.1).unwrap();
    c.bench_function("shortest_path", |b| b.iter(|| shortest_path(black_box(&g), s, t).unwrap()));

    let lattice = Lattice::new(&fx.world, 0.25).unwrap();
    let (p, q) = (&fx.endpoints.0.position, &fx.endpoints.1.position);
    c.bench_function("lattice_astar", |b| b.iter(|| lattice.plan(&fx.world, black_box(p), q).unwrap()));

    let mut group = c.benchmark_group("guided_denoise");
    group.sample_size(10);
    group.bench_function("long_route", |b| {
        b.iter(|| denoise_plan(black_box(&fx.plan), &fx.prior, &fx.config.denoiser, 0).unwrap())
    });
    group.finish();
}

criterion_group!(planning, benches);
criterion_main!(planning);
