//! Subcommand bodies. Each reads its inputs from the resolved configuration
//! and writes its outputs plus the resolved configuration into `out`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use egonav::actions::{build_action_set, ActionSet};
use egonav::dataset::{synth_trajectories, TrajectoryDataset};
use egonav::env::{read_traces, rollout_policy, run_training, write_traces, EpisodeTrace, Policy, RolloutOptions};
use egonav::eval::{
    cross_scene_eval, heading_velocity_angles, median_abs, write_metrics_csv, AngleHistogram, MetricsReport,
    MetricsRow, NamedCheckpoint,
};
use egonav::gait::{KinematicPrior, MotionPrior};
use egonav::prior::{train_vae, VaeParams, VaePrior};
use egonav::qlearn::QCheckpoint;
use egonav::scene::{generate_scene, load_scene, Scene};
use log::info;
use serde::Serialize;

use crate::config::{PriorKind, RunConfig, SceneKind};

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    SceneGen,
    SynthData,
    PriorTrain,
    ActionsBuild,
    Train,
    Eval,
    CrossEval,
    Record,
    AnalyzeAngles,
}

/// Thread count: the request (0 = all cores) capped by `EGO_NAV_THREADS`.
pub fn jobs(requested: Option<usize>) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut n = match requested {
        Some(0) | None => cores,
        Some(n) => n,
    };
    if let Some(cap) = std::env::var("EGO_NAV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if cap > 0 {
            n = n.min(cap);
        }
    }
    n.max(1)
}

pub fn run(kind: Kind, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.write_beside(out)?;
    match kind {
        Kind::SceneGen => scene_gen(cfg, out),
        Kind::SynthData => synth_data(cfg, out),
        Kind::PriorTrain => prior_train(cfg, out),
        Kind::ActionsBuild => actions_build(cfg, out),
        Kind::Train => train(cfg, out),
        Kind::Eval => eval(cfg, out, jobs, &hash),
        Kind::CrossEval => cross_eval(cfg, out, jobs, &hash),
        Kind::Record => record(cfg, out, jobs, &hash),
        Kind::AnalyzeAngles => analyze_angles(cfg, out),
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing input: pass --{flag} or set it in the config"))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_prior(cfg: &RunConfig) -> Result<Box<dyn MotionPrior>> {
    Ok(match cfg.prior.kind {
        PriorKind::Kinematic => Box::new(KinematicPrior),
        PriorKind::Vae => {
            let path = need(&cfg.inputs.prior, "prior-path")?;
            Box::new(VaePrior {
                params: VaeParams::load(path).with_context(|| format!("loading prior {}", path.display()))?,
                temperature: cfg.prior.temperature,
            })
        }
    })
}

fn load_actions(cfg: &RunConfig) -> Result<ActionSet> {
    let path = need(&cfg.inputs.actions, "actions")?;
    ActionSet::load(path).with_context(|| format!("loading actions {}", path.display()))
}

fn load_scene_input(path: &Path) -> Result<Scene> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn load_checkpoint(path: &Path, actions: &ActionSet) -> Result<QCheckpoint> {
    let ck = QCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ck.verify_actions(&actions.checksum())
        .with_context(|| format!("checkpoint {} was trained with a different action set", path.display()))?;
    Ok(ck)
}

fn scene_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scene = match cfg.scene.kind {
        SceneKind::Generated => generate_scene(cfg.seed, &cfg.scene.params)?,
        SceneKind::Corridor => Scene::corridor(cfg.scene.corridor_length, cfg.scene.corridor_width),
    };
    scene.save(&out.join("scene.json"))?;
    info!("scene {} with {} boxes", scene.id, scene.boxes.len());
    Ok(())
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = synth_trajectories(cfg.seed, cfg.synth.sequences, &cfg.synth.params)?;
    ds.save(&out.join("dataset.bin"))?;
    info!("{} sequences, {} frames, id {}", ds.sequences.len(), ds.n_frames(), ds.id());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let path = need(&cfg.inputs.dataset, "dataset")?;
    TrajectoryDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    loss: f64,
}

fn prior_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (vae, losses) = train_vae(&ds, &cfg.prior.train, cfg.seed)?;
    vae.save(&out.join("vae.bin"))?;
    let mut log = BufWriter::new(File::create(out.join("prior_log.ndjson"))?);
    for (epoch, loss) in losses.iter().enumerate() {
        serde_json::to_writer(&mut log, &EpochLine { epoch, loss: *loss })?;
        writeln!(log)?;
    }
    log.flush()?;
    info!("trained prior for {} epochs, final loss {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn actions_build(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let set = build_action_set(&ds, cfg.actions.t_frames, &cfg.actions.kmeans, cfg.seed)?;
    set.save(&out.join("actions.json"))?;
    info!("{} actions, checksum {}", set.len(), set.checksum());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_scene_input(need(&cfg.inputs.scene, "scene")?)?;
    let actions = load_actions(cfg)?;
    let prior = load_prior(cfg)?;
    let resume = match &cfg.inputs.resume {
        Some(p) => Some(load_checkpoint(p, &actions)?),
        None => None,
    };
    let mut env = egonav::env::NavEnv::new(&scene, prior.as_ref(), &actions, cfg.env)?;
    let checksum = actions.checksum();
    let ck_path = out.join("checkpoint.bin");
    let mut log = BufWriter::new(File::create(out.join("train_log.ndjson"))?);
    run_training(&mut env, &cfg.train, cfg.seed, resume.as_ref(), &mut log, &mut |step, learner| {
        QCheckpoint::from_learner(learner, &checksum, step).save(&ck_path)?;
        info!("step {step}/{}: checkpoint written", cfg.train.total_steps);
        Ok(())
    })?;
    log.flush()?;
    Ok(())
}

fn rollouts(cfg: &RunConfig, scene: &Scene, jobs: usize, hash: &str) -> Result<Vec<EpisodeTrace>> {
    let actions = load_actions(cfg)?;
    let prior = load_prior(cfg)?;
    let ck = if cfg.eval.random {
        None
    } else {
        Some(load_checkpoint(need(&cfg.inputs.checkpoint, "checkpoint")?, &actions)?)
    };
    let net = ck.as_ref().map(|c| c.online_net());
    let policy = match &net {
        Some(n) => Policy::Greedy(n),
        None => Policy::Random,
    };
    let traces = rollout_policy(
        scene,
        prior.as_ref(),
        &actions,
        &cfg.env,
        policy,
        &RolloutOptions {
            n_episodes: cfg.eval.episodes,
            seed: cfg.seed,
            jobs,
            keep_poses: cfg.eval.keep_poses,
            config_hash: hash,
        },
    )?;
    Ok(traces)
}

fn policy_name(cfg: &RunConfig) -> String {
    match (&cfg.inputs.checkpoint, cfg.eval.random) {
        (_, true) => "random".into(),
        (Some(p), false) => p.display().to_string(),
        (None, false) => "greedy".into(),
    }
}

fn eval(cfg: &RunConfig, out: &Path, jobs: usize, hash: &str) -> Result<()> {
    let scene = load_scene_input(need(&cfg.inputs.scene, "scene")?)?;
    let traces = rollouts(cfg, &scene, jobs, hash)?;
    let report = MetricsReport::from_traces(&traces, hash)?;
    let row = MetricsRow::new(&policy_name(cfg), &scene.id, &report);
    write_metrics_csv(File::create(out.join("metrics.csv"))?, &[row])?;
    write_json(&out.join("metrics.json"), &report)?;
    info!(
        "SR {:.1}% CR {:.1}% FS {} over {} episodes",
        report.success_rate,
        report.collision_rate,
        report.foot_skating.map_or("n/a".into(), |f| format!("{f:.2}%")),
        report.n_episodes
    );
    Ok(())
}

fn cross_eval(cfg: &RunConfig, out: &Path, jobs: usize, hash: &str) -> Result<()> {
    if cfg.inputs.checkpoints.is_empty() || cfg.inputs.scenes.is_empty() {
        bail!("cross-eval needs at least one --checkpoint and one --scene");
    }
    let actions = load_actions(cfg)?;
    let prior = load_prior(cfg)?;
    let checkpoints = cfg
        .inputs
        .checkpoints
        .iter()
        .map(|p| {
            Ok(NamedCheckpoint {
                name: p.display().to_string(),
                checkpoint: load_checkpoint(p, &actions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scenes = cfg.inputs.scenes.iter().map(|p| load_scene_input(p)).collect::<Result<Vec<_>>>()?;
    let m = cross_scene_eval(
        &checkpoints,
        &scenes,
        prior.as_ref(),
        &actions,
        &cfg.env,
        cfg.eval.episodes,
        cfg.seed,
        jobs,
        hash,
    )?;
    write_metrics_csv(File::create(out.join("metrics.csv"))?, &m.rows)?;
    write_json(&out.join("confusion.json"), &m)?;
    info!("{}×{} confusion matrices written", m.train.len(), m.test.len());
    Ok(())
}

fn record(cfg: &RunConfig, out: &Path, jobs: usize, hash: &str) -> Result<()> {
    let scene = load_scene_input(need(&cfg.inputs.scene, "scene")?)?;
    let traces = rollouts(cfg, &scene, jobs, hash)?;
    let mut w = BufWriter::new(File::create(out.join("traces.ndjson"))?);
    write_traces(&mut w, &traces)?;
    w.flush()?;
    info!("recorded {} episodes", traces.len());
    Ok(())
}

#[derive(Serialize)]
struct AngleSummary {
    frames: usize,
    median_abs_deg: Option<f64>,
    speed_floor: f64,
}

fn analyze_angles(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = need(&cfg.inputs.traces, "traces")?;
    let file = File::open(path).with_context(|| format!("opening traces {}", path.display()))?;
    let traces = read_traces(&mut BufReader::new(file))?;
    let angles = heading_velocity_angles(&traces, cfg.eval.speed_floor, cfg.env.episode.fps)?;
    let hist = AngleHistogram::new(&angles, cfg.eval.angle_bins)?;
    hist.write_csv(File::create(out.join("angles.csv"))?)?;
    let summary = AngleSummary {
        frames: angles.len(),
        median_abs_deg: median_abs(&angles),
        speed_floor: cfg.eval.speed_floor,
    };
    write_json(&out.join("angles.json"), &summary)?;
    info!("{} moving frames, median |angle| {:?}", summary.frames, summary.median_abs_deg);
    Ok(())
}
