//! Head-mounted pinhole raycaster producing the egocentric observation.
//!
//! Channels, in order: normalized depth, semantic RGB, goal mask, and
//! optionally three constant planes with the goal offset in the head frame.
//! Camera frame convention: `x` right, `y` up, looking down `-z`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::HeadPose;
use crate::dataset::Reader;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{palette_color, GoalSpec, Scene, SceneBox};

pub const BASE_CHANNELS: usize = 5;
pub const GOAL_VECTOR_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub horizontal_fov: f64,
    pub max_depth: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            horizontal_fov: 130f64.to_radians(),
            max_depth: 10.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera", "width and height must be positive"));
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI) {
            return Err(Error::validation("camera.horizontal_fov", "must lie in (0, π)"));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::validation("camera.max_depth", "must be positive"));
        }
        Ok(())
    }

    /// Focal length in pixels; pixels are square.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov / 2.0).tan()
    }

    pub fn vertical_fov(&self) -> f64 {
        2.0 * ((self.height as f64 / 2.0) / self.focal()).atan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensorFacing {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub camera: CameraConfig,
    pub facing: SensorFacing,
    /// Append the goal offset as three constant planes (known-goal variant).
    pub goal_vector: bool,
    /// Distance from the head joint to the camera along the viewing axis.
    pub mount_offset: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            facing: SensorFacing::Forward,
            goal_vector: false,
            mount_offset: 0.10,
        }
    }
}

impl SensorConfig {
    pub fn channels(&self) -> usize {
        BASE_CHANNELS + if self.goal_vector { GOAL_VECTOR_CHANNELS } else { 0 }
    }
}

/// Unit ray directions in the camera frame, row-major from the top-left pixel.
pub fn camera_rays(cfg: &CameraConfig) -> Vec<Vec3> {
    let f = cfg.focal();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut rays = Vec::with_capacity(cfg.width * cfg.height);
    for j in 0..cfg.height {
        for i in 0..cfg.width {
            let x = (i as f64 + 0.5 - w / 2.0) / f;
            let y = -(j as f64 + 0.5 - h / 2.0) / f;
            rays.push(Vec3::new(x, y, -1.0).normalize());
        }
    }
    rays
}

/// Camera pose in the world: `rotation` maps camera-frame vectors to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub rotation: Matrix3<f64>,
}

pub fn camera_frame(head: &HeadPose, sensor: &SensorConfig) -> CameraFrame {
    // camera axes (right, up, back) expressed in the head's (forward, left, up) frame
    let mount = match sensor.facing {
        SensorFacing::Forward => Matrix3::new(0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        SensorFacing::Backward => Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    };
    let rotation = head.rotation * mount;
    let view = -rotation.column(2).into_owned();
    CameraFrame {
        origin: head.translation + sensor.mount_offset * view,
        rotation,
    }
}

/// Entry distance of a ray into a box (0 if the origin is inside).
pub(crate) fn ray_box(origin: &Vec3, dir: &Vec3, b: &SceneBox) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        let inv = 1.0 / dir[k];
        let t1 = (b.min[k] - origin[k]) * inv;
        let t2 = (b.max[k] - origin[k]) * inv;
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    if tmax >= tmin.max(0.0) {
        Some(tmin.max(0.0))
    } else {
        None
    }
}

/// First intersection distance with a sphere (0 if the origin is inside).
pub(crate) fn ray_sphere(origin: &Vec3, dir: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = dir.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Floor,
    Box(usize),
    Goal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-major `[channel][row][col]`.
    pub data: Vec<f32>,
}

impl ObservationTensor {
    fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn depth(&self) -> &[f32] {
        self.plane(0)
    }

    pub fn goal_mask(&self) -> &[f32] {
        self.plane(4)
    }

    pub fn semantic(&self, i: usize, j: usize) -> [f32; 3] {
        let k = j * self.width + i;
        [self.plane(1)[k], self.plane(2)[k], self.plane(3)[k]]
    }

    pub fn goal_pixels(&self) -> usize {
        self.goal_mask().iter().filter(|&&m| m > 0.5).count()
    }

    /// `u32 width, u32 height, u32 channels` then the raw `f32` data, little-endian.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let width = rd.u32()? as usize;
        let height = rd.u32()? as usize;
        let channels = rd.u32()? as usize;
        let n = width * height * channels;
        let data = (0..n).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
        if rd.pos != bytes.len() {
            return Err(Error::parse("observation dump", "trailing bytes"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Short content hash for trace records.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Binary PPM previews: depth (gray), semantics (RGB), goal mask (gray).
    pub fn ppm_previews(&self) -> [Vec<u8>; 3] {
        let n = self.width * self.height;
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out: [Vec<u8>; 3] = Default::default();
        for img in out.iter_mut() {
            img.extend_from_slice(header.as_bytes());
        }
        for k in 0..n {
            let d = byte(self.data[k]);
            out[0].extend_from_slice(&[d, d, d]);
            for c in 1..4 {
                out[1].push(byte(self.data[c * n + k]));
            }
            let m = byte(self.data[4 * n + k]);
            out[2].extend_from_slice(&[m, m, m]);
        }
        out
    }
}

/// Raycaster with precomputed camera rays.
#[derive(Debug, Clone)]
pub struct EgoSensor {
    pub cfg: SensorConfig,
    rays: Vec<Vec3>,
}

impl EgoSensor {
    pub fn new(cfg: SensorConfig) -> Result<Self> {
        cfg.camera.validate()?;
        Ok(Self {
            rays: camera_rays(&cfg.camera),
            cfg,
        })
    }

    pub fn rays(&self) -> &[Vec3] {
        &self.rays
    }

    pub fn render(&self, scene: &Scene, goal: &GoalSpec, head: &HeadPose) -> ObservationTensor {
        let cam = self.cfg.camera;
        let frame = camera_frame(head, &self.cfg);
        let n = cam.width * cam.height;
        let channels = self.cfg.channels();
        let mut data = vec![0f32; channels * n];
        let floor_color = palette_color(scene.floor_class).unwrap_or([0.5; 3]);
        let goal_color = palette_color(GoalSpec::CLASS).unwrap_or([1.0, 0.0, 0.0]);
        for (k, ray) in self.rays.iter().enumerate() {
            let dir = frame.rotation * ray;
            let mut best: Option<(f64, Hit)> = None;
            let mut consider = |t: f64, h: Hit| {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, h));
                }
            };
            if dir.z < 0.0 {
                consider(-frame.origin.z / dir.z, Hit::Floor);
            }
            for (i, b) in scene.boxes.iter().enumerate() {
                if let Some(t) = ray_box(&frame.origin, &dir, b) {
                    consider(t, Hit::Box(i));
                }
            }
            if let Some(t) = ray_sphere(&frame.origin, &dir, &goal.center, goal.radius) {
                consider(t, Hit::Goal);
            }
            let (depth, color, mask) = match best {
                None => (1.0, [0.0; 3], 0.0),
                Some((t, hit)) => {
                    let color = match hit {
                        Hit::Floor => floor_color,
                        Hit::Box(i) => scene.boxes[i].color,
                        Hit::Goal => goal_color,
                    };
                    let mask = if hit == Hit::Goal { 1.0 } else { 0.0 };
                    ((t / cam.max_depth).min(1.0), color, mask)
                }
            };
            data[k] = depth as f32;
            for c in 0..3 {
                data[(1 + c) * n + k] = color[c] as f32;
            }
            data[4 * n + k] = mask as f32;
        }
        if self.cfg.goal_vector {
            let local = head.rotation.transpose() * (goal.center - head.translation) / cam.max_depth;
            for c in 0..3 {
                data[(BASE_CHANNELS + c) * n..(BASE_CHANNELS + c + 1) * n].fill(local[c] as f32);
            }
        }
        ObservationTensor {
            width: cam.width,
            height: cam.height,
            channels,
            data,
        }
    }

    /// Center-ray test: the goal center projects inside the image and the
    /// segment to the sphere surface is not blocked by any box.
    pub fn goal_visible(&self, scene: &Scene, goal: &GoalSpec, head: &HeadPose) -> bool {
        let cam = self.cfg.camera;
        let frame = camera_frame(head, &self.cfg);
        let to_goal = goal.center - frame.origin;
        let dist = to_goal.norm();
        if dist <= goal.radius {
            return true;
        }
        let v = frame.rotation.transpose() * to_goal;
        if v.z >= 0.0 {
            return false;
        }
        let f = cam.focal();
        let half_w = cam.width as f64 / 2.0 / f;
        let half_h = cam.height as f64 / 2.0 / f;
        if v.x.abs() > half_w * -v.z || v.y.abs() > half_h * -v.z {
            return false;
        }
        let dir = to_goal / dist;
        let surface = dist - goal.radius;
        !scene
            .boxes
            .iter()
            .any(|b| ray_box(&frame.origin, &dir, b).is_some_and(|t| t < surface))
    }
}

pub fn render_ego(scene: &Scene, goal: &GoalSpec, head: &HeadPose, cfg: &SensorConfig) -> Result<ObservationTensor> {
    Ok(EgoSensor::new(*cfg)?.render(scene, goal, head))
}

pub fn goal_visible(scene: &Scene, goal: &GoalSpec, head: &HeadPose, cfg: &SensorConfig) -> Result<bool> {
    Ok(EgoSensor::new(*cfg)?.goal_visible(scene, goal, head))
}
