//! Shared inputs for the benchmarks: a medium-maze dataset, its graph and
//! prior, and a long-route plan, all built once from fixed seeds.

use xplan_core::pipeline::{generate_dataset, graph_from_dataset, plan_goal, medium_maze_tasks, RunConfig};
use xplan_core::{ConnectivityGraph, Dataset, LocalPrior, State, TemporalEmbedding, WaypointPlan, World};

pub struct Fixture {
    pub config: RunConfig,
    pub world: World,
    pub dataset: Dataset,
    pub embedding: TemporalEmbedding,
    pub graph: ConnectivityGraph,
    pub prior: LocalPrior,
    /// Start and goal of the longest bundled task.
    pub endpoints: (State, State),
    pub plan: WaypointPlan,
}

pub fn maze_fixture() -> Fixture {
    let config = RunConfig::goal_reaching();
    let world = config.world.build().expect("fixture world");
    let dataset = generate_dataset(&config, &world, 1).expect("dataset");
    let embedding = TemporalEmbedding::identity(world.dim());
    let graph = graph_from_dataset(&config.graph, &dataset, &embedding, 2).expect("graph");
    let prior = LocalPrior::fit(&dataset, config.denoiser.stride).expect("prior");
    let task = &medium_maze_tasks()[1];
    let endpoints = (State::at_rest(task.start.clone()), State::at_rest(task.goal.clone()));
    let plan = plan_goal(&graph, &endpoints.0, &endpoints.1, &config.planner, prior.dt_plan).expect("plan");
    Fixture {
        config,
        world,
        dataset,
        embedding,
        graph,
        prior,
        endpoints,
        plan,
    }
}
