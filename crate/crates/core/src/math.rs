//! Small geometry helpers shared by the body model, sensor and action space.
//!
//! World frame: `x`/`y` span the floor, `z` points up. A yaw of `θ` faces
//! `(cos θ, sin θ, 0)`. Local body/head frames use `x` forward, `y` left, `z` up.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Rotates a 2-vector by `angle` radians.
pub fn rotate2(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Rotates the horizontal part of `v` by `angle` about the world up axis.
pub fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Head orientation from yaw and pitch (positive pitch looks up).
///
/// Columns are the head's forward, left and up axes in world coordinates.
pub fn yaw_pitch_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), -pitch);
    (rz * ry).into_inner()
}

/// Recovers `(yaw, pitch)` from a roll-free rotation built by [`yaw_pitch_rotation`].
pub fn yaw_pitch_of(r: &Matrix3<f64>) -> (f64, f64) {
    let f = r.column(0);
    let yaw = f.y.atan2(f.x);
    let pitch = f.z.clamp(-1.0, 1.0).asin();
    (yaw, pitch)
}

/// Geodesic angle between two rotations.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Deterministic RNG for `(seed, stream)`; distinct streams never overlap.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn yaw_pitch_axes() {
        let r = yaw_pitch_rotation(PI / 2.0, 0.0);
        assert!((r.column(0) - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((r.column(1) - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let r = yaw_pitch_rotation(0.3, 0.4);
        let (y, p) = yaw_pitch_of(&r);
        assert!((y - 0.3).abs() < 1e-12 && (p - 0.4).abs() < 1e-12);
        assert!(r.column(0).z > 0.0);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_distance_of_yaw() {
        let a = yaw_pitch_rotation(0.1, 0.0);
        let b = yaw_pitch_rotation(0.4, 0.0);
        assert!((rotation_distance(&a, &b) - 0.3).abs() < 1e-9);
    }
}
