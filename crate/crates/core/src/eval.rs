//! Episode metrics, cross-scene confusion matrices and heading/velocity angles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::actions::ActionSet;
use crate::body::Pose;
use crate::env::{rollout_policy, EnvConfig, EpisodeTrace, Outcome, Policy, RolloutOptions};
use crate::error::{Error, Result};
use crate::gait::MotionPrior;
use crate::qlearn::QCheckpoint;
use crate::scene::Scene;

/// Horizontal slide per frame above which a grounded contact point skates.
pub const SKATE_THRESHOLD_M: f64 = 0.0066;
/// Height below which a foot counts as touching the ground.
pub const CONTACT_BAND_M: f64 = 0.02;
pub const SPEED_FLOOR: f64 = 0.1;
pub const ANGLE_BINS: usize = 36;

fn nonempty(traces: &[EpisodeTrace]) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no episode traces".into()));
    }
    Ok(())
}

pub fn success_rate(traces: &[EpisodeTrace]) -> Result<f64> {
    nonempty(traces)?;
    let n = traces.iter().filter(|t| t.header.outcome == Outcome::Reached).count();
    Ok(100.0 * n as f64 / traces.len() as f64)
}

/// Collided actions over all actions, pooled across episodes.
pub fn collision_rate(traces: &[EpisodeTrace]) -> Result<f64> {
    nonempty(traces)?;
    let total: usize = traces.iter().map(|t| t.actions.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("traces contain no actions".into()));
    }
    let hit = traces.iter().flat_map(|t| &t.actions).filter(|a| a.collided).count();
    Ok(100.0 * hit as f64 / total as f64)
}

fn frames_of(t: &EpisodeTrace) -> Result<Vec<Pose>> {
    t.frames()
        .ok_or_else(|| Error::InvalidArgument(format!("episode {} was recorded without poses", t.header.episode)))
}

/// Whether the lowest foot slides over the frame pair `a → b`. The lowest
/// foot is the one whose higher height across the pair is smaller.
pub fn skates(a: &Pose, b: &Pose) -> bool {
    let pairs = [(a.left_foot, b.left_foot), (a.right_foot, b.right_foot)];
    let (p, q) = pairs
        .into_iter()
        .min_by(|x, y| x.0.z.max(x.1.z).total_cmp(&y.0.z.max(y.1.z)))
        .expect("two feet");
    p.z.max(q.z) < CONTACT_BAND_M && (q.xy() - p.xy()).norm() > SKATE_THRESHOLD_M
}

/// Skating frame pairs over all frame pairs, percent.
pub fn foot_skating(traces: &[EpisodeTrace]) -> Result<f64> {
    nonempty(traces)?;
    let (mut pairs, mut skating) = (0usize, 0usize);
    for t in traces {
        let f = frames_of(t)?;
        for w in f.windows(2) {
            pairs += 1;
            skating += skates(&w[0], &w[1]) as usize;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("traces contain no frame pairs".into()));
    }
    Ok(100.0 * skating as f64 / pairs as f64)
}

/// Signed angle from the head's horizontal forward to the pelvis velocity,
/// degrees in (−180, 180], for every frame pair at or above `speed_floor`.
pub fn heading_velocity_angles(traces: &[EpisodeTrace], speed_floor: f64, fps: u32) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for t in traces {
        let f = frames_of(t)?;
        for w in f.windows(2) {
            let v = (w[1].pelvis_xy - w[0].pelvis_xy) * fps as f64;
            if v.norm() < speed_floor {
                continue;
            }
            let yaw = w[0].head_yaw;
            let (fx, fy) = (yaw.cos(), yaw.sin());
            let a = (fx * v.y - fy * v.x).atan2(fx * v.x + fy * v.y).to_degrees();
            out.push(if a <= -180.0 { a + 360.0 } else { a });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    /// `bins + 1` edges from −180 to 180 degrees; bin `i` is `(edges[i], edges[i+1]]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl AngleHistogram {
    pub fn new(angles: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let w = 360.0 / bins as f64;
        let edges = (0..=bins).map(|i| -180.0 + w * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &a in angles {
            if !(a > -180.0 && a <= 180.0) {
                return Err(Error::InvalidArgument(format!("angle {a} outside (-180, 180]")));
            }
            let i = (((a + 180.0) / w).ceil() as usize).clamp(1, bins) - 1;
            counts[i] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::InvalidArgument(format!("angles csv: {e}"));
        c.write_record(["bin_lo_deg", "bin_hi_deg", "count"]).map_err(err)?;
        for (i, n) in self.counts.iter().enumerate() {
            c.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), n.to_string()])
                .map_err(err)?;
        }
        c.flush().map_err(|e| Error::io("angles csv", e))
    }
}

/// Median of absolute angles; `None` for no samples.
pub fn median_abs(angles: &[f64]) -> Option<f64> {
    if angles.is_empty() {
        return None;
    }
    let mut a: Vec<f64> = angles.iter().map(|x| x.abs()).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    Some(if n % 2 == 1 { a[n / 2] } else { 0.5 * (a[n / 2 - 1] + a[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub success_rate: f64,
    pub collision_rate: f64,
    /// `None` when the traces were recorded without poses.
    pub foot_skating: Option<f64>,
    pub n_episodes: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_traces(traces: &[EpisodeTrace], config_hash: &str) -> Result<Self> {
        let has_poses = traces.iter().all(|t| t.frames().is_some());
        Ok(Self {
            success_rate: success_rate(traces)?,
            collision_rate: collision_rate(traces)?,
            foot_skating: if has_poses { Some(foot_skating(traces)?) } else { None },
            n_episodes: traces.len(),
            config_hash: config_hash.to_string(),
        })
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: String,
    pub scene: String,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub foot_skating: Option<f64>,
    pub config_hash: String,
}

impl MetricsRow {
    pub fn new(checkpoint: &str, scene: &str, r: &MetricsReport) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            scene: scene.into(),
            n_episodes: r.n_episodes,
            success_rate: r.success_rate,
            collision_rate: r.collision_rate,
            foot_skating: r.foot_skating,
            config_hash: r.config_hash.clone(),
        }
    }
}

pub fn write_metrics_csv(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    for r in rows {
        c.serialize(r).map_err(|e| Error::InvalidArgument(format!("metrics csv: {e}")))?;
    }
    if rows.is_empty() {
        c.write_record(["checkpoint", "scene", "n_episodes", "success_rate", "collision_rate", "foot_skating", "config_hash"])
            .map_err(|e| Error::InvalidArgument(format!("metrics csv: {e}")))?;
    }
    c.flush().map_err(|e| Error::io("metrics csv", e))
}

/// A trained checkpoint with the name of the scene it was trained on.
pub struct NamedCheckpoint {
    pub name: String,
    pub checkpoint: QCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEval {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// `sr[i][j]`: checkpoint `i` evaluated on scene `j`.
    pub sr: Vec<Vec<f64>>,
    pub cr: Vec<Vec<f64>>,
    pub rows: Vec<MetricsRow>,
}

/// Evaluates every checkpoint on every scene with the same episode seeds.
#[allow(clippy::too_many_arguments)]
pub fn cross_scene_eval(
    checkpoints: &[NamedCheckpoint],
    scenes: &[Scene],
    prior: &dyn MotionPrior,
    actions: &ActionSet,
    cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    jobs: usize,
    config_hash: &str,
) -> Result<CrossEval> {
    if checkpoints.is_empty() || scenes.is_empty() || n_episodes == 0 {
        return Err(Error::InvalidArgument("cross evaluation needs checkpoints, scenes and episodes".into()));
    }
    let checksum = actions.checksum();
    for c in checkpoints {
        c.checkpoint.verify_actions(&checksum)?;
    }
    let mut out = CrossEval {
        train: checkpoints.iter().map(|c| c.name.clone()).collect(),
        test: scenes.iter().map(|s| s.id.clone()).collect(),
        sr: Vec::new(),
        cr: Vec::new(),
        rows: Vec::new(),
    };
    for c in checkpoints {
        let net = c.checkpoint.online_net();
        let (mut sr, mut cr) = (Vec::new(), Vec::new());
        for s in scenes {
            let traces = rollout_policy(
                s,
                prior,
                actions,
                cfg,
                Policy::Greedy(&net),
                &RolloutOptions {
                    n_episodes,
                    seed,
                    jobs,
                    keep_poses: true,
                    config_hash,
                },
            )?;
            let r = MetricsReport::from_traces(&traces, config_hash)?;
            sr.push(r.success_rate);
            cr.push(r.collision_rate);
            out.rows.push(MetricsRow::new(&c.name, &s.id, &r));
        }
        out.sr.push(sr);
        out.cr.push(cr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges_and_bins() {
        let h = AngleHistogram::new(&[180.0, -179.9, 0.0, 10.0, 10.1], 36).unwrap();
        assert_eq!(h.edges.len(), 37);
        assert_eq!(h.counts[35], 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[17], 1);
        assert_eq!(h.counts[18], 1);
        assert_eq!(h.counts[19], 1);
        assert_eq!(h.total(), 5);
        assert!(AngleHistogram::new(&[-180.0], 36).is_err());
    }

    #[test]
    fn median_of_absolute_values() {
        assert_eq!(median_abs(&[]), None);
        assert_eq!(median_abs(&[-3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median_abs(&[-4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
