use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "xplan",
    version,
    about = "Graph search over offline states followed by waypoint-guided denoising",
    after_help = "Config fields can be overridden with dotted flags, e.g. --graph.k 30 or --denoiser.gamma=5."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults depend on the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Recompute even when the cache has this stage.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Goal,
    Mapf,
    Inspection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanTask {
    Goal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset in the configured world.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Evaluation seed whose dataset stream to use.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Fit the temporal embedding to a dataset.
    BuildEmbedding {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Build the connectivity graph.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Search the graph for a waypoint plan.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "goal")]
        task: PlanTask,
        #[arg(long)]
        graph: PathBuf,
        /// Start position, comma separated.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        start: Point,
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        goal: Point,
    },
    /// Guided sampling of a full trajectory, from a plan or (unguided) from
    /// start and goal alone.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Dataset the local prior is fitted on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with_all = ["start", "goal"])]
        plan: Option<PathBuf>,
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true, requires = "goal")]
        start: Option<Point>,
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true, requires = "start")]
        goal: Option<Point>,
        /// Sampler seed; derived from the root seed when absent.
        #[arg(long)]
        denoise_seed: Option<u64>,
    },
    /// Track a denoised trajectory, or a plan directly, in the world.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Goal position for the success check; defaults to the plan or
        /// trajectory end.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        goal: Option<Point>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run an evaluation harness end to end.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Number of agents for the multi-agent task.
        #[arg(long, default_value_t = 2)]
        agents: usize,
        /// Number of POIs for the inspection task.
        #[arg(long, default_value_t = 8)]
        pois: usize,
    },
    /// Graph and downsampling ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Check the config and any given artifacts.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::BuildEmbedding { common, .. }
            | Command::BuildGraph { common, .. }
            | Command::Plan { common, .. }
            | Command::Denoise { common, .. }
            | Command::Rollout { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common }
            | Command::Validate { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::BuildEmbedding { .. } => "build-embedding",
            Command::BuildGraph { .. } => "build-graph",
            Command::Plan { .. } => "plan",
            Command::Denoise { .. } => "denoise",
            Command::Rollout { .. } => "rollout",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Validate { .. } => "validate",
        }
    }
}

/// Comma-separated coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(pub Vec<f64>);

pub fn parse_point(s: &str) -> Result<Point, String> {
    let p: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad coordinate '{x}': {e}")))
        .collect::<Result<_, _>>()?;
    if p.is_empty() || p.iter().any(|x| !x.is_finite()) {
        return Err(format!("bad point '{s}'"));
    }
    Ok(Point(p))
}

pub type Overrides = Vec<(String, String)>;

/// Splits dotted config overrides (`--graph.k 30`, `--graph.k=30`) from the
/// arguments clap should see.
pub fn split_overrides(argv: Vec<String>) -> Result<(Vec<String>, Overrides), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(v(&["xplan", "eval", "--graph.k", "30", "--denoiser.gamma=5", "--out", "r/x.y"])).unwrap();
        assert_eq!(rest, v(&["xplan", "eval", "--out", "r/x.y"]));
        assert_eq!(ov, vec![("graph.k".into(), "30".into()), ("denoiser.gamma".into(), "5".into())]);
        assert!(split_overrides(v(&["xplan", "--graph.k"])).is_err());
    }

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("1, -2.5").unwrap(), Point(vec![1.0, -2.5]));
        assert!(parse_point("1,x").is_err());
        assert!(parse_point("nan").is_err());
    }
}
