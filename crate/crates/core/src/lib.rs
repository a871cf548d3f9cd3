//! Long-horizon trajectory planning by graph search over offline states
//! followed by waypoint-guided compositional denoising.
//!
//! The pipeline: [`dataset`] generates short demonstrations in an
//! [`env`] world, [`embedding`] turns empirical temporal distances into a
//! vector space, [`graph`] links sampled states into a connectivity graph,
//! [`planners`] search it for temporal waypoints, and [`denoiser`] composes a
//! single full-horizon trajectory guided by those waypoints. [`pipeline`]
//! wires everything into evaluation harnesses.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod denoiser;
pub mod embedding;
pub mod env;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod pipeline;
pub mod planners;
pub mod seed;

pub use dataset::{Dataset, Source, Trajectory};
pub use denoiser::{
    DenoiseSchedule, GuidanceField, GuidedTrajectory, LocalPrior, SampleMode, SegmentLayout,
};
pub use embedding::{EmbeddingMode, TemporalEmbedding, TransitionGraph};
pub use env::{Action, Dynamics, PdGains, State, Trace, World, WorldKind};
pub use error::{Error, Result};
pub use graph::ConnectivityGraph;
pub use planners::{GraphPath, WaypointPlan};
