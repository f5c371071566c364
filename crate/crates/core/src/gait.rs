//! Procedural head-target-conditioned motion prior.
//!
//! Each frame the pelvis turns toward the walking direction (or the target
//! yaw once close), then translates toward the target under a speed cap that
//! shrinks for sideways and backward motion. The head follows the target
//! orientation inside the neck limits. Feet alternate on a fixed clock; a
//! stance foot never moves, so generated motion has no foot skating.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{
    head_reached, neutral_feet, HeadPose, MotionChunk, Pose, ReachTolerance, HEAD_Z_MAX, HEAD_Z_MIN,
    NECK_LIMIT, PITCH_LIMIT,
};
use crate::error::{Error, Result};
use crate::math::{wrap_angle, yaw_pitch_of, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitConfig {
    /// Forward speed cap, m/s.
    pub v_max: f64,
    /// Speed cap when moving directly backward or sideways, m/s.
    pub v_back: f64,
    /// Pelvis turn rate cap, rad/s.
    pub omega_max: f64,
    /// Head yaw/pitch rate cap, rad/s.
    pub head_omega: f64,
    pub head_z_speed: f64,
    /// Duration of a full left+right stride, seconds.
    pub step_cycle_s: f64,
    pub step_height: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            v_max: 1.5,
            v_back: 0.5,
            omega_max: PI,
            head_omega: 1.5 * PI,
            head_z_speed: 0.5,
            step_cycle_s: 0.6,
            step_height: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub fps: u32,
    /// Maximum number of generated frames per chunk.
    pub t_frames: usize,
    pub reach: ReachTolerance,
    pub gait: GaitConfig,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            fps: 30,
            t_frames: 30,
            reach: ReachTolerance::default(),
            gait: GaitConfig::default(),
        }
    }
}

impl ChunkConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.fps as f64
    }
}

/// Anything that turns a head target into a motion chunk.
pub trait MotionPrior: Send + Sync {
    fn rollout(
        &self,
        p0: &Pose,
        target: &HeadPose,
        cfg: &ChunkConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MotionChunk>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KinematicPrior;

impl MotionPrior for KinematicPrior {
    fn rollout(
        &self,
        p0: &Pose,
        target: &HeadPose,
        cfg: &ChunkConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<MotionChunk> {
        kinematic_rollout(p0, target, cfg)
    }
}

pub(crate) fn check_target(target: &HeadPose) -> Result<()> {
    let z = target.translation.z;
    if !(HEAD_Z_MIN..=HEAD_Z_MAX).contains(&z) {
        return Err(Error::Infeasible(format!(
            "target height {z:.3} m outside [{HEAD_Z_MIN}, {HEAD_Z_MAX}]"
        )));
    }
    Ok(())
}

/// Below this distance the pelvis stops facing its walking direction and
/// turns to the target yaw instead.
const ALIGN_DIST: f64 = 0.3;
const FOOT_EPS: f64 = 0.02;

pub fn kinematic_rollout(p0: &Pose, target: &HeadPose, cfg: &ChunkConfig) -> Result<MotionChunk> {
    check_target(target)?;
    let (tyaw, tpitch) = yaw_pitch_of(&target.rotation);
    let mut poses = Vec::with_capacity(cfg.t_frames);
    let mut p = *p0;
    let mut reached = false;
    if head_reached(p0, target, &cfg.reach) {
        // Already there: hold for one frame so the chunk is never empty.
        p = kinematic_step(&p, target, tyaw, tpitch, cfg);
        poses.push(p);
        reached = head_reached(&p, target, &cfg.reach);
    } else {
        for _ in 0..cfg.t_frames {
            p = kinematic_step(&p, target, tyaw, tpitch, cfg);
            poses.push(p);
            if head_reached(&p, target, &cfg.reach) {
                reached = true;
                break;
            }
        }
    }
    Ok(MotionChunk {
        displacement: (p.pelvis_xy - p0.pelvis_xy).norm(),
        poses,
        reached,
    })
}

/// Speed cap for moving along `dir` (unit) while facing `heading`.
pub(crate) fn speed_cap(gait: &GaitConfig, dir: Vec2, heading: f64) -> f64 {
    let cos_phi = dir.x * heading.cos() + dir.y * heading.sin();
    gait.v_back + (gait.v_max - gait.v_back) * cos_phi.max(0.0)
}

fn step_toward(value: f64, goal: f64, max_step: f64) -> f64 {
    value + (goal - value).clamp(-max_step, max_step)
}

/// One frame of the procedural prior.
pub fn kinematic_step(p: &Pose, target: &HeadPose, tyaw: f64, tpitch: f64, cfg: &ChunkConfig) -> Pose {
    let g = &cfg.gait;
    let dt = cfg.dt();
    let to = target.translation.xy() - p.pelvis_xy;
    let dist = to.norm();

    let desired = if dist > ALIGN_DIST {
        let bearing = to.y.atan2(to.x);
        if wrap_angle(bearing - tyaw).abs() <= PI / 2.0 {
            bearing
        } else {
            tyaw
        }
    } else {
        tyaw
    };
    let max_turn = g.omega_max * dt;
    let turn = wrap_angle(desired - p.pelvis_heading).clamp(-max_turn, max_turn);
    let heading = wrap_angle(p.pelvis_heading + turn);

    let mut pelvis = p.pelvis_xy;
    if dist > 0.0 {
        let dir = to / dist;
        let step = (speed_cap(g, dir, heading) * dt).min(dist);
        pelvis += dir * step;
    }

    let max_head = g.head_omega * dt;
    let yaw = wrap_angle(p.head_yaw + wrap_angle(tyaw - p.head_yaw).clamp(-max_head, max_head));
    let rel = wrap_angle(yaw - heading).clamp(-NECK_LIMIT, NECK_LIMIT);
    let head_yaw = wrap_angle(heading + rel);
    let head_pitch = step_toward(p.head_pitch, tpitch, max_head).clamp(-PITCH_LIMIT, PITCH_LIMIT);
    let head_z = step_toward(p.head_pos.z, target.translation.z, g.head_z_speed * dt)
        .clamp(HEAD_Z_MIN, HEAD_Z_MAX);

    let mut next = Pose {
        pelvis_xy: pelvis,
        pelvis_heading: heading,
        head_pos: nalgebra::Vector3::new(pelvis.x, pelvis.y, head_z),
        head_yaw,
        head_pitch,
        left_foot: p.left_foot,
        right_foot: p.right_foot,
        frame_index: p.frame_index + 1,
    };
    let moving = (pelvis - p.pelvis_xy).norm() > 0.0 || turn != 0.0;
    step_feet(&mut next, pelvis - p.pelvis_xy, moving, cfg);
    next
}

/// Advances the swing foot for the frame `next.frame_index`; the stance
/// foot is left untouched.
fn step_feet(next: &mut Pose, velocity_step: Vec2, moving: bool, cfg: &ChunkConfig) {
    let half = ((cfg.gait.step_cycle_s * cfg.fps as f64) / 2.0).round().max(1.0) as u64;
    let phase = next.frame_index % (2 * half);
    let left_swings = phase < half;
    let k = phase % half;
    let s = (k + 1) as f64 / half as f64;
    let s_prev = k as f64 / half as f64;

    let (left_n, right_n) = neutral_feet(next.pelvis_xy, next.pelvis_heading);
    let (foot, neutral) = if left_swings {
        (&mut next.left_foot, left_n)
    } else {
        (&mut next.right_foot, right_n)
    };
    let active = if k == 0 {
        moving || (foot.xy() - neutral).norm() > FOOT_EPS
    } else {
        foot.z > 0.0
    };
    if !active {
        return;
    }
    // Lead the landing spot by the distance the pelvis covers during the rest of the swing.
    let remaining = (half - k) as f64;
    let target = neutral + velocity_step * remaining;
    let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
    let frac = (smooth(s) - smooth(s_prev)) / (1.0 - smooth(s_prev));
    let xy = foot.xy() + (target - foot.xy()) * frac;
    foot.x = xy.x;
    foot.y = xy.y;
    foot.z = if k + 1 == half {
        0.0
    } else {
        cfg.gait.step_height * (PI * s).sin()
    };
}

/// Turns a raw 2-vector step into a capped one; used to clamp learned deltas.
pub(crate) fn clamp_step(step: Vec2, heading: f64, gait: &GaitConfig, dt: f64) -> Vec2 {
    let n = step.norm();
    if n == 0.0 {
        return step;
    }
    let cap = speed_cap(gait, step / n, heading) * dt;
    if n > cap {
        step * (cap / n)
    } else {
        step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::PoseDelta;
    use crate::math::Vec3;

    fn ahead(p: &Pose, d: f64) -> HeadPose {
        let f = Vec2::new(p.pelvis_heading.cos(), p.pelvis_heading.sin());
        let xy = p.pelvis_xy + f * d;
        HeadPose::from_yaw_pitch(Vec3::new(xy.x, xy.y, p.head_pos.z), p.pelvis_heading, 0.0)
    }

    #[test]
    fn already_at_target() {
        let p = Pose::standing(Vec2::new(1.0, 1.0), 0.5);
        let c = kinematic_rollout(&p, &p.head_pose(), &ChunkConfig::default()).unwrap();
        assert_eq!(c.poses.len(), 1);
        assert!(c.reached);
        assert_eq!(c.poses[0].frame_index, 1);
    }

    #[test]
    fn half_meter_fast_walk() {
        let p = Pose::standing(Vec2::zeros(), 0.0);
        let mut cfg = ChunkConfig::default();
        cfg.gait.v_max = 2.0;
        let c = kinematic_rollout(&p, &ahead(&p, 0.5), &cfg).unwrap();
        assert!(c.reached);
        // 0.4 m must be covered at 2/30 m per frame before the 0.1 m tolerance
        assert!(c.poses.len() <= 15, "{}", c.poses.len());
    }

    #[test]
    fn far_target_times_out() {
        let p = Pose::standing(Vec2::zeros(), 0.0);
        let cfg = ChunkConfig::default();
        let c = kinematic_rollout(&p, &ahead(&p, 5.0), &cfg).unwrap();
        assert!(!c.reached);
        assert_eq!(c.poses.len(), 30);
        assert!((c.displacement - 1.5).abs() < 1e-9);
    }

    #[test]
    fn infeasible_height_rejected() {
        let p = Pose::standing(Vec2::zeros(), 0.0);
        let mut t = p.head_pose();
        t.translation.z = 2.5;
        assert!(matches!(
            kinematic_rollout(&p, &t, &ChunkConfig::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn rate_limits_and_contiguous_frames() {
        let cfg = ChunkConfig::default();
        let p = Pose::standing(Vec2::zeros(), 0.0);
        for (dx, dy, yaw) in [(1.0, 0.0, 0.0), (-1.0, 0.3, 0.0), (0.0, 1.0, 2.5), (0.4, -0.8, -1.0)] {
            let t = HeadPose::from_yaw_pitch(Vec3::new(dx, dy, 1.55), yaw, 0.2);
            let c = kinematic_rollout(&p, &t, &cfg).unwrap();
            let mut prev = p;
            for q in &c.poses {
                assert_eq!(q.frame_index, prev.frame_index + 1);
                assert!((q.pelvis_xy - prev.pelvis_xy).norm() <= cfg.gait.v_max / 30.0 + 1e-9);
                assert!(wrap_angle(q.pelvis_heading - prev.pelvis_heading).abs() <= cfg.gait.omega_max / 30.0 + 1e-9);
                q.validate().unwrap();
                prev = *q;
            }
            if c.reached {
                assert!(head_reached(c.poses.last().unwrap(), &t, &cfg.reach));
            } else {
                assert_eq!(c.poses.len(), cfg.t_frames);
            }
        }
    }

    #[test]
    fn backward_motion_is_slow() {
        let cfg = ChunkConfig::default();
        let p = Pose::standing(Vec2::zeros(), 0.0);
        let t = HeadPose::from_yaw_pitch(Vec3::new(-0.5, 0.0, 1.6), 0.0, 0.0);
        let c = kinematic_rollout(&p, &t, &cfg).unwrap();
        let mut prev = p;
        for q in &c.poses {
            let d = PoseDelta::between(&prev, q);
            assert!(d.pelvis.x <= 1e-12);
            assert!(d.pelvis.norm() <= cfg.gait.v_back / 30.0 + 1e-9);
            prev = *q;
        }
        assert!(c.reached);
    }

    #[test]
    fn stance_foot_is_world_fixed() {
        let cfg = ChunkConfig::default();
        let mut p = Pose::standing(Vec2::zeros(), 0.0);
        let mut frames = vec![p];
        for (x, y, yaw) in [(1.2, 0.0, 0.0), (1.2, 0.0, 1.5), (1.5, 1.0, 1.5), (1.5, 1.0, 1.5)] {
            let t = HeadPose::from_yaw_pitch(Vec3::new(x, y, 1.6), yaw, 0.0);
            let c = kinematic_rollout(&p, &t, &cfg).unwrap();
            frames.extend(c.poses.iter().copied());
            p = *c.poses.last().unwrap();
        }
        for w in frames.windows(2) {
            for (a, b) in [(w[0].left_foot, w[1].left_foot), (w[0].right_foot, w[1].right_foot)] {
                if a.z == 0.0 && b.z == 0.0 {
                    assert!((a - b).norm() < 1e-12, "planted foot slid");
                }
            }
        }
    }
}
