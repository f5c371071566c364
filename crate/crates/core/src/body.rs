//! Simplified rigid body: pelvis, head and two feet, plus the pose-delta
//! algebra the motion priors integrate.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::math::{rotate2, rotate_z, rotation_distance, wrap_angle, yaw_pitch_rotation, Vec2, Vec3};

pub const HEAD_Z_MIN: f64 = 1.2;
pub const HEAD_Z_MAX: f64 = 1.9;
pub const STANDING_HEAD_Z: f64 = 1.6;
/// Maximum head yaw relative to the pelvis heading.
pub const NECK_LIMIT: f64 = FRAC_PI_2;
pub const PITCH_LIMIT: f64 = FRAC_PI_4;
/// Lateral offset of each foot from the pelvis in the neutral stance.
pub const FOOT_LATERAL: f64 = 0.1;

/// Number of floats in a serialized pose row.
pub const POSE_DIM: usize = 14;
/// Number of floats in a serialized pose delta.
pub const DELTA_DIM: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub pelvis_xy: Vec2,
    pub pelvis_heading: f64,
    pub head_pos: Vec3,
    pub head_yaw: f64,
    pub head_pitch: f64,
    pub left_foot: Vec3,
    pub right_foot: Vec3,
    /// Frame counter on the 30 fps clock.
    pub frame_index: u64,
}

impl Pose {
    /// Neutral standing pose with the head looking along the heading.
    pub fn standing(pelvis_xy: Vec2, heading: f64) -> Self {
        let heading = wrap_angle(heading);
        let (left, right) = neutral_feet(pelvis_xy, heading);
        Self {
            pelvis_xy,
            pelvis_heading: heading,
            head_pos: Vec3::new(pelvis_xy.x, pelvis_xy.y, STANDING_HEAD_Z),
            head_yaw: heading,
            head_pitch: 0.0,
            left_foot: Vec3::new(left.x, left.y, 0.0),
            right_foot: Vec3::new(right.x, right.y, 0.0),
            frame_index: 0,
        }
    }

    pub fn head_pose(&self) -> HeadPose {
        HeadPose::from_yaw_pitch(self.head_pos, self.head_yaw, self.head_pitch)
    }

    /// Row layout: pelvis x, y, heading, head x, y, z, head yaw, pitch,
    /// left foot x, y, z, right foot x, y, z.
    pub fn to_row(&self) -> [f64; POSE_DIM] {
        [
            self.pelvis_xy.x,
            self.pelvis_xy.y,
            self.pelvis_heading,
            self.head_pos.x,
            self.head_pos.y,
            self.head_pos.z,
            self.head_yaw,
            self.head_pitch,
            self.left_foot.x,
            self.left_foot.y,
            self.left_foot.z,
            self.right_foot.x,
            self.right_foot.y,
            self.right_foot.z,
        ]
    }

    pub fn from_row(row: &[f64], frame_index: u64) -> Self {
        assert_eq!(row.len(), POSE_DIM);
        Self {
            pelvis_xy: Vec2::new(row[0], row[1]),
            pelvis_heading: row[2],
            head_pos: Vec3::new(row[3], row[4], row[5]),
            head_yaw: row[6],
            head_pitch: row[7],
            left_foot: Vec3::new(row[8], row[9], row[10]),
            right_foot: Vec3::new(row[11], row[12], row[13]),
            frame_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-6;
        if !self.to_row().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        if self.head_pos.z < HEAD_Z_MIN - TOL || self.head_pos.z > HEAD_Z_MAX + TOL {
            return Err(Error::validation("head_pos.z", format!("{} outside head band", self.head_pos.z)));
        }
        if wrap_angle(self.head_yaw - self.pelvis_heading).abs() > NECK_LIMIT + TOL {
            return Err(Error::validation("head_yaw", "exceeds neck limit"));
        }
        if self.head_pitch.abs() > PITCH_LIMIT + TOL {
            return Err(Error::validation("head_pitch", "exceeds pitch limit"));
        }
        if self.left_foot.z < -TOL || self.right_foot.z < -TOL {
            return Err(Error::validation("feet", "below the floor"));
        }
        Ok(())
    }

    /// Projects the pose back into its invariant set.
    pub fn clamp_to_limits(&mut self) {
        self.pelvis_heading = wrap_angle(self.pelvis_heading);
        self.head_pos.z = self.head_pos.z.clamp(HEAD_Z_MIN, HEAD_Z_MAX);
        let rel = wrap_angle(self.head_yaw - self.pelvis_heading).clamp(-NECK_LIMIT, NECK_LIMIT);
        self.head_yaw = wrap_angle(self.pelvis_heading + rel);
        self.head_pitch = self.head_pitch.clamp(-PITCH_LIMIT, PITCH_LIMIT);
        self.left_foot.z = self.left_foot.z.max(0.0);
        self.right_foot.z = self.right_foot.z.max(0.0);
    }
}

pub(crate) fn neutral_feet(pelvis: Vec2, heading: f64) -> (Vec2, Vec2) {
    let left = pelvis + rotate2(Vec2::new(0.0, FOOT_LATERAL), heading);
    let right = pelvis + rotate2(Vec2::new(0.0, -FOOT_LATERAL), heading);
    (left, right)
}

/// Frame-to-frame difference with translations in the earlier pose's
/// pelvis frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseDelta {
    pub pelvis: Vec2,
    pub heading: f64,
    pub head: Vec3,
    pub head_yaw: f64,
    pub head_pitch: f64,
    pub left_foot: Vec3,
    pub right_foot: Vec3,
}

impl PoseDelta {
    pub fn between(from: &Pose, to: &Pose) -> Self {
        let h = from.pelvis_heading;
        Self {
            pelvis: rotate2(to.pelvis_xy - from.pelvis_xy, -h),
            heading: wrap_angle(to.pelvis_heading - from.pelvis_heading),
            head: rotate_z(to.head_pos - from.head_pos, -h),
            head_yaw: wrap_angle(to.head_yaw - from.head_yaw),
            head_pitch: to.head_pitch - from.head_pitch,
            left_foot: rotate_z(to.left_foot - from.left_foot, -h),
            right_foot: rotate_z(to.right_foot - from.right_foot, -h),
        }
    }

    pub fn to_array(&self) -> [f64; DELTA_DIM] {
        [
            self.pelvis.x,
            self.pelvis.y,
            self.heading,
            self.head.x,
            self.head.y,
            self.head.z,
            self.head_yaw,
            self.head_pitch,
            self.left_foot.x,
            self.left_foot.y,
            self.left_foot.z,
            self.right_foot.x,
            self.right_foot.y,
            self.right_foot.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), DELTA_DIM);
        Self {
            pelvis: Vec2::new(v[0], v[1]),
            heading: v[2],
            head: Vec3::new(v[3], v[4], v[5]),
            head_yaw: v[6],
            head_pitch: v[7],
            left_foot: Vec3::new(v[8], v[9], v[10]),
            right_foot: Vec3::new(v[11], v[12], v[13]),
        }
    }
}

/// Integrates one delta; the exact inverse of [`PoseDelta::between`].
pub fn apply_delta(p: &Pose, d: &PoseDelta) -> Pose {
    let h = p.pelvis_heading;
    Pose {
        pelvis_xy: p.pelvis_xy + rotate2(d.pelvis, h),
        pelvis_heading: wrap_angle(h + d.heading),
        head_pos: p.head_pos + rotate_z(d.head, h),
        head_yaw: wrap_angle(p.head_yaw + d.head_yaw),
        head_pitch: p.head_pitch + d.head_pitch,
        left_foot: p.left_foot + rotate_z(d.left_foot, h),
        right_foot: p.right_foot + rotate_z(d.right_foot, h),
        frame_index: p.frame_index + 1,
    }
}

/// Rigid head frame: columns of `rotation` are forward, left and up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPose {
    pub translation: Vec3,
    pub rotation: Matrix3<f64>,
}

impl HeadPose {
    pub fn from_yaw_pitch(translation: Vec3, yaw: f64, pitch: f64) -> Self {
        Self {
            translation,
            rotation: yaw_pitch_rotation(yaw, pitch),
        }
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(0).into_owned()
    }

    /// 4×4 homogeneous transform, row-major.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReachTolerance {
    pub pos_m: f64,
    pub ang_rad: f64,
}

impl Default for ReachTolerance {
    fn default() -> Self {
        Self {
            pos_m: 0.10,
            ang_rad: 10f64.to_radians(),
        }
    }
}

/// Closed thresholds on head position and geodesic orientation error.
pub fn head_reached(p: &Pose, target: &HeadPose, tol: &ReachTolerance) -> bool {
    let head = p.head_pose();
    (head.translation - target.translation).norm() <= tol.pos_m
        && rotation_distance(&head.rotation, &target.rotation) <= tol.ang_rad
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionChunk {
    pub poses: Vec<Pose>,
    pub reached: bool,
    /// Pelvis distance from the chunk's starting pose to its last pose.
    pub displacement: f64,
}
