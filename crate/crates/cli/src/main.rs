mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egonav::sensor::SensorFacing;

use crate::config::{Override, PriorKind, RunConfig, SceneKind};

/// Egocentric-vision navigation pipeline: scenes, motion priors, action sets,
/// Q-learning, evaluation and analysis.
///
/// Configuration precedence: a `--config` JSON file overrides command-line
/// flags, which override built-in defaults. Every command writes
/// `resolved_config.json` and its SHA-256 beside its outputs.
#[derive(Debug, Parser)]
#[command(name = "egonav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file whose values override flags and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PriorArgs {
    /// Motion prior driving the body.
    #[arg(long, value_enum, default_value_t = PriorKind::Kinematic)]
    prior: PriorKind,
    /// Trained prior weights, required with `--prior vae`.
    #[arg(long)]
    prior_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Facing {
    Forward,
    Backward,
}

#[derive(Debug, Args)]
struct SensorArgs {
    /// Which way the head camera looks.
    #[arg(long, value_enum, default_value_t = Facing::Forward)]
    facing: Facing,
    /// Append the goal-direction channels to observations.
    #[arg(long)]
    goal_vector: bool,
}

#[derive(Debug, Args)]
struct JobsArgs {
    /// Parallel episodes; 0 uses every core. Capped by EGO_NAV_THREADS.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a box scene and write scene.json.
    SceneGen {
        #[command(flatten)]
        common: Common,
        /// Procedural room or empty corridor.
        #[arg(long, value_enum, default_value_t = SceneKind::Generated)]
        kind: SceneKind,
        /// Obstacle count for generated rooms.
        #[arg(long, default_value_t = 6)]
        obstacles: usize,
    },
    /// Synthesize walking trajectories and write dataset.bin.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of sequences.
        #[arg(long, default_value_t = 300)]
        sequences: usize,
    },
    /// Train the pose-delta VAE prior and write vae.bin.
    PriorTrain {
        #[command(flatten)]
        common: Common,
        /// Trajectory dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Training epochs.
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
    /// Cluster head-pose deltas into an action set and write actions.json.
    ActionsBuild {
        #[command(flatten)]
        common: Common,
        /// Trajectory dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of actions.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Train the Q-network and write checkpoint.bin and train_log.ndjson.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene file.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Action set file.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[command(flatten)]
        prior: PriorArgs,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Gradient steps.
        #[arg(long, default_value_t = 30_000)]
        steps: u64,
        /// Continue from this checkpoint's weights and step count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out a policy and write metrics.csv and metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; omit with `--random`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a uniformly random policy instead of a checkpoint.
        #[arg(long)]
        random: bool,
        /// Scene file.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Action set file.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[command(flatten)]
        prior: PriorArgs,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Episodes to average over.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[command(flatten)]
        jobs: JobsArgs,
    },
    /// Evaluate every checkpoint on every scene; write metrics.csv and confusion.json.
    CrossEval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint, one per training scene (repeatable).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Test scene (repeatable).
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
        /// Action set shared by all checkpoints.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[command(flatten)]
        prior: PriorArgs,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Episodes per checkpoint and scene.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[command(flatten)]
        jobs: JobsArgs,
    },
    /// Roll out a policy and write traces.ndjson.
    Record {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; omit with `--random`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Record a uniformly random policy instead of a checkpoint.
        #[arg(long)]
        random: bool,
        /// Scene file.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Action set file.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[command(flatten)]
        prior: PriorArgs,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Episodes to record.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[command(flatten)]
        jobs: JobsArgs,
    },
    /// Histogram head-forward vs pelvis-velocity angles; write angles.csv and angles.json.
    AnalyzeAngles {
        #[command(flatten)]
        common: Common,
        /// Trace file from `record`.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Frames slower than this (m/s) are skipped.
        #[arg(long, default_value_t = egonav::eval::SPEED_FLOOR)]
        speed_floor: f64,
        /// Histogram bins over (-180, 180].
        #[arg(long, default_value_t = egonav::eval::ANGLE_BINS)]
        bins: usize,
    },
}

fn opt(out: &mut Vec<Override>, path: &'static str, v: Option<PathBuf>) {
    if let Some(v) = v {
        out.push(Override::new(path, v));
    }
}

fn prior_flags(out: &mut Vec<Override>, p: PriorArgs) {
    out.push(Override::new("prior/kind", p.prior));
    opt(out, "inputs/prior", p.prior_path);
}

fn sensor_flags(out: &mut Vec<Override>, s: SensorArgs) {
    let facing = match s.facing {
        Facing::Forward => SensorFacing::Forward,
        Facing::Backward => SensorFacing::Backward,
    };
    out.push(Override::new("env/sensor/facing", facing));
    out.push(Override::new("env/sensor/goal_vector", s.goal_vector));
}

/// Splits a parsed command into its common flags, config overrides and job count.
fn flags(cmd: Command) -> (commands::Kind, Common, Vec<Override>, Option<usize>) {
    use commands::Kind;
    let mut o = Vec::new();
    match cmd {
        Command::SceneGen { common, kind, obstacles } => {
            o.push(Override::new("scene/kind", kind));
            o.push(Override::new("scene/params/n_obstacles", obstacles));
            (Kind::SceneGen, common, o, None)
        }
        Command::SynthData { common, sequences } => {
            o.push(Override::new("synth/sequences", sequences));
            (Kind::SynthData, common, o, None)
        }
        Command::PriorTrain { common, dataset, epochs } => {
            opt(&mut o, "inputs/dataset", dataset);
            o.push(Override::new("prior/train/epochs", epochs));
            (Kind::PriorTrain, common, o, None)
        }
        Command::ActionsBuild { common, dataset, n } => {
            opt(&mut o, "inputs/dataset", dataset);
            o.push(Override::new("actions/kmeans/k", n));
            (Kind::ActionsBuild, common, o, None)
        }
        Command::Train { common, scene, actions, prior, sensor, steps, resume } => {
            opt(&mut o, "inputs/scene", scene);
            opt(&mut o, "inputs/actions", actions);
            opt(&mut o, "inputs/resume", resume);
            prior_flags(&mut o, prior);
            sensor_flags(&mut o, sensor);
            o.push(Override::new("train/total_steps", steps));
            (Kind::Train, common, o, None)
        }
        Command::Eval { common, checkpoint, random, scene, actions, prior, sensor, episodes, jobs } => {
            opt(&mut o, "inputs/checkpoint", checkpoint);
            opt(&mut o, "inputs/scene", scene);
            opt(&mut o, "inputs/actions", actions);
            prior_flags(&mut o, prior);
            sensor_flags(&mut o, sensor);
            o.push(Override::new("eval/episodes", episodes));
            o.push(Override::new("eval/random", random));
            (Kind::Eval, common, o, Some(jobs.jobs))
        }
        Command::CrossEval { common, checkpoints, scenes, actions, prior, sensor, episodes, jobs } => {
            if !checkpoints.is_empty() {
                o.push(Override::new("inputs/checkpoints", checkpoints));
            }
            if !scenes.is_empty() {
                o.push(Override::new("inputs/scenes", scenes));
            }
            opt(&mut o, "inputs/actions", actions);
            prior_flags(&mut o, prior);
            sensor_flags(&mut o, sensor);
            o.push(Override::new("eval/episodes", episodes));
            (Kind::CrossEval, common, o, Some(jobs.jobs))
        }
        Command::Record { common, checkpoint, random, scene, actions, prior, sensor, episodes, jobs } => {
            opt(&mut o, "inputs/checkpoint", checkpoint);
            opt(&mut o, "inputs/scene", scene);
            opt(&mut o, "inputs/actions", actions);
            prior_flags(&mut o, prior);
            sensor_flags(&mut o, sensor);
            o.push(Override::new("eval/episodes", episodes));
            o.push(Override::new("eval/random", random));
            (Kind::Record, common, o, Some(jobs.jobs))
        }
        Command::AnalyzeAngles { common, traces, speed_floor, bins } => {
            opt(&mut o, "inputs/traces", traces);
            o.push(Override::new("eval/speed_floor", speed_floor));
            o.push(Override::new("eval/angle_bins", bins));
            (Kind::AnalyzeAngles, common, o, None)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (kind, common, mut overrides, jobs) = flags(cli.command);
    overrides.insert(0, Override::new("seed", common.seed));
    let run = RunConfig::resolve(overrides, common.config.as_deref())
        .and_then(|cfg| commands::run(kind, &cfg, &common.out, commands::jobs(jobs)));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
