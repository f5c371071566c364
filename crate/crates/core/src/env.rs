//! Episodic navigation MDP: action → head target → motion chunk → reward.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{resolve_action, ActionSet};
use crate::body::{apply_delta, Pose, PoseDelta};
use crate::error::{Error, Result};
use crate::gait::{ChunkConfig, MotionPrior};
use crate::math::rng_stream;
use crate::qlearn::{epsilon, select_action, ConvQNet, Learner, QCheckpoint, QNetShape, StepMetrics, StoredObs, TrainConfig, Transition};
use crate::scene::{collide, sample_start_goal, GoalSpec, PlacementConfig, Scene, BODY_RADIUS};
use crate::sensor::{EgoSensor, ObservationTensor, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub r_r: f64,
    pub r_t: f64,
    pub r_c: f64,
    pub r_m: f64,
    pub move_threshold_m: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_r: 10.0,
            r_t: 0.05,
            r_c: 1.0,
            r_m: 0.1,
            move_threshold_m: 0.10,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("r_r", self.r_r),
            ("r_t", self.r_t),
            ("r_c", self.r_c),
            ("r_m", self.r_m),
            ("move_threshold_m", self.move_threshold_m),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(f, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkOutcome {
    pub reached_and_visible: bool,
    pub collided: bool,
    /// Pelvis distance covered by the chunk.
    pub displacement: f64,
}

pub fn compute_reward(o: &ChunkOutcome, cfg: &RewardConfig) -> f64 {
    if o.reached_and_visible {
        return cfg.r_r;
    }
    let mut r = -cfg.r_t;
    if o.collided {
        r -= cfg.r_c;
    }
    if o.displacement < cfg.move_threshold_m {
        r -= cfg.r_m;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub horizon_s: f64,
    pub chunk_s: f64,
    pub fps: u32,
    /// Horizontal pelvis-to-goal distance that counts as reached.
    pub reach_dist: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon_s: 15.0,
            chunk_s: 1.0,
            fps: 30,
            reach_dist: 0.50,
        }
    }
}

impl EpisodeConfig {
    pub fn horizon_frames(&self) -> usize {
        (self.horizon_s * self.fps as f64).round() as usize
    }

    pub fn chunk_frames(&self) -> usize {
        (self.chunk_s * self.fps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || !(self.chunk_s > 0.0) || !(self.horizon_s > 0.0) || !(self.reach_dist > 0.0) {
            return Err(Error::validation("episode", "fps, chunk_s, horizon_s and reach_dist must be positive"));
        }
        let (h, c) = (self.horizon_frames(), self.chunk_frames());
        if c == 0 || h % c != 0 {
            return Err(Error::validation("horizon_s", "horizon must be a whole number of chunks"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub sensor: SensorConfig,
    pub episode: EpisodeConfig,
    pub reward: RewardConfig,
    pub placement: PlacementConfig,
    pub chunk: ChunkConfig,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.reward.validate()?;
        self.sensor.camera.validate()?;
        if self.chunk.fps != self.episode.fps {
            return Err(Error::validation("chunk.fps", "must equal episode.fps"));
        }
        Ok(())
    }

    pub fn q_shape(&self, n_actions: usize) -> QNetShape {
        let c = &self.sensor.camera;
        QNetShape::new(self.sensor.channels(), c.height, c.width, n_actions)
    }
}

/// Per-episode training seed drawn from its own stream so episodes can run in any order.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    rng_stream(seed, 1 << 32 | episode).next_u64()
}

/// Evaluation episodes use a separate family of streams from training.
pub fn eval_episode_seed(seed: u64, episode: u64) -> u64 {
    rng_stream(seed, 2 << 32 | episode).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub collided: bool,
    pub goal_visible: bool,
    pub reached: bool,
    pub displacement: f64,
    /// Chunk poses after collision handling.
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: ObservationTensor,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One scene with its sensor, prior and action set; episodes are reset in place.
pub struct NavEnv<'a> {
    pub scene: &'a Scene,
    pub prior: &'a dyn MotionPrior,
    pub actions: &'a ActionSet,
    pub cfg: EnvConfig,
    sensor: EgoSensor,
    pose: Pose,
    goal: GoalSpec,
    frames_used: usize,
    done: bool,
    prior_rng: ChaCha8Rng,
}

impl<'a> NavEnv<'a> {
    pub fn new(scene: &'a Scene, prior: &'a dyn MotionPrior, actions: &'a ActionSet, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let start = Pose::standing(scene.bounds.min, 0.0);
        Ok(Self {
            scene,
            prior,
            actions,
            sensor: EgoSensor::new(cfg.sensor)?,
            cfg,
            goal: GoalSpec {
                center: start.head_pos,
                radius: cfg.placement.goal_radius,
            },
            pose: start,
            frames_used: 0,
            done: true,
            prior_rng: rng_stream(0, 0),
        })
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observe(&self) -> ObservationTensor {
        self.sensor.render(self.scene, &self.goal, &self.pose.head_pose())
    }

    pub fn reset(&mut self, episode_seed: u64) -> Result<ObservationTensor> {
        let sg = sample_start_goal(self.scene, episode_seed, &self.cfg.placement)?;
        self.reset_to(sg.start, sg.goal, episode_seed)
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, start: Pose, goal: GoalSpec, episode_seed: u64) -> Result<ObservationTensor> {
        start.validate()?;
        self.pose = start;
        self.goal = goal;
        self.frames_used = 0;
        self.done = false;
        self.prior_rng = rng_stream(episode_seed, 2);
        Ok(self.observe())
    }

    /// Pelvis within `reach_dist` of the goal (horizontally) and goal visible.
    pub fn reached(&self) -> bool {
        let d = (self.pose.pelvis_xy - self.goal.center.xy()).norm();
        d <= self.cfg.episode.reach_dist && self.sensor.goal_visible(self.scene, &self.goal, &self.pose.head_pose())
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let Some(delta) = self.actions.centroids.get(action) else {
            return Err(Error::InvalidArgument(format!("action {action} out of range 0..{}", self.actions.len())));
        };
        let target = resolve_action(&self.pose.head_pose(), delta);
        let horizon = self.cfg.episode.horizon_frames();
        let chunk_cfg = ChunkConfig {
            t_frames: self.cfg.episode.chunk_frames().min(horizon - self.frames_used),
            ..self.cfg.chunk
        };
        let chunk = self.prior.rollout(&self.pose, &target, &chunk_cfg, &mut self.prior_rng)?;

        // Replay the chunk frame by frame; a frame whose disc hits geometry
        // keeps the previous horizontal position.
        let start = self.pose;
        let mut prev_raw = start;
        let mut cur = start;
        let mut collided = false;
        let mut poses = Vec::with_capacity(chunk.poses.len());
        for raw in &chunk.poses {
            let mut next = apply_delta(&cur, &PoseDelta::between(&prev_raw, raw));
            prev_raw = *raw;
            if collide(self.scene, next.pelvis_xy, BODY_RADIUS).hit {
                collided = true;
                let shift = cur.pelvis_xy - next.pelvis_xy;
                next.pelvis_xy = cur.pelvis_xy;
                next.head_pos.x += shift.x;
                next.head_pos.y += shift.y;
                next.left_foot.x = cur.left_foot.x;
                next.left_foot.y = cur.left_foot.y;
                next.right_foot.x = cur.right_foot.x;
                next.right_foot.y = cur.right_foot.y;
            }
            cur = next;
            poses.push(cur);
        }
        self.pose = cur;
        self.frames_used += poses.len();

        let goal_visible = self.sensor.goal_visible(self.scene, &self.goal, &self.pose.head_pose());
        let reached = goal_visible && (self.pose.pelvis_xy - self.goal.center.xy()).norm() <= self.cfg.episode.reach_dist;
        let displacement = (self.pose.pelvis_xy - start.pelvis_xy).norm();
        let reward = compute_reward(
            &ChunkOutcome {
                reached_and_visible: reached,
                collided,
                displacement,
            },
            &self.cfg.reward,
        );
        self.done = reached || self.frames_used >= horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                collided,
                goal_visible,
                reached,
                displacement,
                poses,
            },
        })
    }
}

/// One line of the training log, written when an episode ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    /// Gradient steps taken so far.
    pub step: u64,
    pub env_step: u64,
    pub loss: Option<f64>,
    pub mean_q: Option<f64>,
    pub eps: f64,
    pub episode_return: f64,
    /// Success rate over the last 100 episodes, percent.
    pub sr_window: f64,
}

const SR_WINDOW: usize = 100;
pub const CHECKPOINT_EVERY: u64 = 1000;

/// Sequential ε-greedy DQN training until `tcfg.total_steps` gradient steps,
/// one per environment step once the replay holds a batch. ε follows the
/// environment step count. `on_checkpoint` runs every [`CHECKPOINT_EVERY`]
/// gradient steps and at the end.
pub fn run_training(
    env: &mut NavEnv,
    tcfg: &TrainConfig,
    seed: u64,
    resume: Option<&QCheckpoint>,
    log: &mut dyn Write,
    on_checkpoint: &mut dyn FnMut(u64, &Learner<ConvQNet<f32>>) -> Result<()>,
) -> Result<Learner<ConvQNet<f32>>> {
    let shape = env.cfg.q_shape(env.actions.len());
    let mut learner = match resume {
        Some(ck) => {
            ck.verify_actions(&env.actions.checksum())?;
            if ck.shape != shape {
                return Err(Error::Shape(format!("checkpoint network {:?} does not match {shape:?}", ck.shape)));
            }
            let mut l = Learner::new(ck.online_net(), *tcfg)?;
            l.target = ck.target_net();
            l.updates = ck.step;
            l
        }
        None => Learner::new(ConvQNet::init(shape, &mut rng_stream(seed, 5))?, *tcfg)?,
    };
    // A resumed run continues the schedules but starts from a fresh stream
    // position, replay buffer and momentum.
    let offset = learner.updates;
    let mut act_rng = rng_stream(seed, 3 + (offset << 8));
    let mut learn_rng = rng_stream(seed, 4 + (offset << 8));
    let channels = env.cfg.sensor.channels();

    let mut episode = offset << 20;
    let mut obs = env.reset(episode_seed(seed, episode))?;
    let mut stored = StoredObs::new(&obs.data, channels, tcfg.storage);
    let mut ret = 0.0;
    let mut window: std::collections::VecDeque<bool> = Default::default();
    let mut last: Option<StepMetrics> = None;
    let mut step = offset;
    while learner.updates < tcfg.total_steps {
        let eps = epsilon(step, tcfg);
        let a = select_action(&learner.online, &obs.data, eps, &mut act_rng)?;
        let r = env.step(a)?;
        let next = StoredObs::new(&r.obs.data, channels, tcfg.storage);
        learner.observe(Transition {
            obs: stored,
            action: a,
            reward: r.reward,
            next_obs: next.clone(),
            // Horizon cut-offs still bootstrap; only reaching the goal is terminal.
            done: r.info.reached,
        })?;
        if learner.ready() {
            last = Some(learner.train_step(&mut learn_rng)?);
            let u = learner.updates;
            if u % CHECKPOINT_EVERY == 0 || u == tcfg.total_steps {
                on_checkpoint(u, &learner)?;
            }
        }
        step += 1;
        ret += r.reward;
        if r.done {
            window.push_back(r.info.reached);
            if window.len() > SR_WINDOW {
                window.pop_front();
            }
            let line = TrainLogLine {
                step: learner.updates,
                env_step: step,
                loss: last.map(|m| m.loss),
                mean_q: last.map(|m| m.mean_q),
                eps,
                episode_return: ret,
                sr_window: 100.0 * window.iter().filter(|x| **x).count() as f64 / window.len() as f64,
            };
            serde_json::to_writer(&mut *log, &line).map_err(|e| Error::parse("training log", e))?;
            writeln!(log).map_err(|e| Error::io("training log", e))?;
            ret = 0.0;
            episode += 1;
            obs = env.reset(episode_seed(seed, episode))?;
            stored = StoredObs::new(&obs.data, channels, tcfg.storage);
        } else {
            obs = r.obs;
            stored = next;
        }
    }
    Ok(learner)
}

/// Header line of one episode in a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub scene: String,
    pub episode: u64,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: Outcome,
    pub n_actions: usize,
    pub start: Vec<f64>,
    pub goal: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub action: usize,
    pub reward: f64,
    pub collided: bool,
    pub goal_visible: bool,
    pub reached: bool,
    /// Checksum of the observation the action was chosen from.
    pub obs_checksum: String,
    /// Pose rows of the chunk; empty when recorded without poses.
    pub poses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub actions: Vec<ActionRecord>,
}

impl EpisodeTrace {
    /// Start pose followed by every chunk pose; `None` if poses were not kept.
    pub fn frames(&self) -> Option<Vec<Pose>> {
        let mut out = vec![Pose::from_row(&self.header.start, 0)];
        for a in &self.actions {
            if a.poses.is_empty() {
                return None;
            }
            for row in &a.poses {
                out.push(Pose::from_row(row, out.len() as u64));
            }
        }
        Some(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Action(ActionRecord),
}

pub fn write_traces(w: &mut dyn Write, traces: &[EpisodeTrace]) -> Result<()> {
    let io = |e| Error::io("trace output", e);
    for t in traces {
        let line = serde_json::to_string(&TraceLine::Header(t.header.clone())).expect("header serializes");
        writeln!(w, "{line}").map_err(io)?;
        for a in &t.actions {
            let line = serde_json::to_string(&TraceLine::Action(a.clone())).expect("record serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_traces(r: &mut dyn BufRead) -> Result<Vec<EpisodeTrace>> {
    let mut out: Vec<EpisodeTrace> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("trace input", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::parse(format!("trace line {}", i + 1), e))? {
            TraceLine::Header(header) => out.push(EpisodeTrace {
                header,
                actions: Vec::new(),
            }),
            TraceLine::Action(a) => match out.last_mut() {
                Some(t) => t.actions.push(a),
                None => return Err(Error::parse(format!("trace line {}", i + 1), "action before any header")),
            },
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Greedy(&'a ConvQNet<f32>),
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions<'a> {
    pub n_episodes: usize,
    pub seed: u64,
    pub jobs: usize,
    pub keep_poses: bool,
    pub config_hash: &'a str,
}

fn run_episode(env: &mut NavEnv, policy: Policy, seed: u64, e: u64, opts: &RolloutOptions) -> Result<EpisodeTrace> {
    let es = eval_episode_seed(seed, e);
    let mut obs = env.reset(es)?;
    let start = env.pose().to_row().to_vec();
    let g = env.goal().center;
    let mut rng = rng_stream(es, 3);
    let mut actions = Vec::new();
    loop {
        let a = match policy {
            Policy::Greedy(net) => select_action(net, &obs.data, 0.0, &mut rng)?,
            Policy::Random => rng.random_range(0..env.actions.len()),
        };
        let checksum = obs.checksum();
        let r = env.step(a)?;
        actions.push(ActionRecord {
            action: a,
            reward: r.reward,
            collided: r.info.collided,
            goal_visible: r.info.goal_visible,
            reached: r.info.reached,
            obs_checksum: checksum,
            poses: if opts.keep_poses {
                r.info.poses.iter().map(|p| p.to_row().to_vec()).collect()
            } else {
                Vec::new()
            },
        });
        if r.done {
            let outcome = if r.info.reached { Outcome::Reached } else { Outcome::Timeout };
            return Ok(EpisodeTrace {
                header: TraceHeader {
                    scene: env.scene.id.clone(),
                    episode: e,
                    seed: es,
                    config_hash: opts.config_hash.to_string(),
                    outcome,
                    n_actions: actions.len(),
                    start,
                    goal: [g.x, g.y, g.z],
                },
                actions,
            });
        }
        obs = r.obs;
    }
}

/// Runs `n_episodes` independent episodes, in parallel over `jobs` threads;
/// results are ordered by episode index.
pub fn rollout_policy(
    scene: &Scene,
    prior: &dyn MotionPrior,
    actions: &ActionSet,
    cfg: &EnvConfig,
    policy: Policy,
    opts: &RolloutOptions,
) -> Result<Vec<EpisodeTrace>> {
    if let Policy::Greedy(net) = policy {
        let want = cfg.q_shape(actions.len());
        if net.shape != want {
            return Err(Error::Shape(format!("network {:?} does not match environment {want:?}", net.shape)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..opts.n_episodes as u64)
            .into_par_iter()
            .map_init(
                || NavEnv::new(scene, prior, actions, *cfg),
                |env, e| match env {
                    Ok(env) => run_episode(env, policy, opts.seed, e, opts),
                    Err(err) => Err(Error::InvalidArgument(err.to_string())),
                },
            )
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_cases() {
        let cfg = RewardConfig::default();
        let o = |r, c, d| ChunkOutcome {
            reached_and_visible: r,
            collided: c,
            displacement: d,
        };
        assert_eq!(compute_reward(&o(true, true, 0.0), &cfg), 10.0);
        assert_eq!(compute_reward(&o(false, false, 1.0), &cfg), -0.05);
        assert!((compute_reward(&o(false, true, 0.01), &cfg) + 1.15).abs() < 1e-12);
        assert!((compute_reward(&o(false, false, 0.05), &cfg) + 0.15).abs() < 1e-12);
    }

    #[test]
    fn episode_config_checks() {
        let e = EpisodeConfig::default();
        assert_eq!(e.horizon_frames(), 450);
        assert_eq!(e.chunk_frames(), 30);
        assert!(EpisodeConfig { horizon_s: 15.5, ..e }.validate().is_err());
        assert!(EpisodeConfig { reach_dist: 0.0, ..e }.validate().is_err());
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0), episode_seed(1, 1));
        assert_ne!(episode_seed(1, 0), episode_seed(2, 0));
        assert_eq!(episode_seed(3, 4), episode_seed(3, 4));
        assert_ne!(episode_seed(3, 4), eval_episode_seed(3, 4));
    }
}
