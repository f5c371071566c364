//! Synthetic locomotion trajectories and their binary file format.
//!
//! File layout (little-endian): `u32 fps`, `u32 pose_dim`, `u32 n_sequences`,
//! then per sequence `u32 n_frames` followed by `n_frames × pose_dim` `f32`
//! values in [`Pose::to_row`] order. Frame indices are implicit (row number).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{HeadPose, Pose, POSE_DIM};
use crate::error::{Error, Result};
use crate::gait::{kinematic_rollout, kinematic_step, ChunkConfig};
use crate::math::{rng_stream, rotate2, wrap_angle, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub fps: u32,
    pub sequences: Vec<Vec<Pose>>,
}

impl TrajectoryDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let frames: usize = self.sequences.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(12 + 4 * self.sequences.len() + 4 * POSE_DIM * frames);
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&(POSE_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        for seq in &self.sequences {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for p in seq {
                for v in p.to_row() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let fps = rd.u32()?;
        let dim = rd.u32()? as usize;
        if dim != POSE_DIM {
            return Err(Error::Shape(format!("pose_dim {dim}, expected {POSE_DIM}")));
        }
        let n = rd.u32()? as usize;
        let mut sequences = Vec::with_capacity(n);
        let mut row = [0f64; POSE_DIM];
        for _ in 0..n {
            let frames = rd.u32()? as usize;
            let mut seq = Vec::with_capacity(frames);
            for f in 0..frames {
                for v in row.iter_mut() {
                    *v = rd.f32()? as f64;
                }
                seq.push(Pose::from_row(&row, f as u64));
            }
            sequences.push(seq);
        }
        if rd.pos != bytes.len() {
            return Err(Error::parse("trajectory dataset", "trailing bytes"));
        }
        Ok(Self { fps, sequences })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash used as the dataset's provenance id.
    pub fn id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl Reader<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse("binary file", "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub chunk: ChunkConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_seconds: 5.0,
            max_seconds: 20.0,
            chunk: ChunkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Walk,
    Arc,
    Turn,
    Stop,
    Side,
    Back,
}

fn pick_segment(rng: &mut ChaCha8Rng) -> Segment {
    let u: f64 = rng.random();
    match u {
        u if u < 0.35 => Segment::Walk,
        u if u < 0.55 => Segment::Arc,
        u if u < 0.70 => Segment::Turn,
        u if u < 0.82 => Segment::Stop,
        u if u < 0.92 => Segment::Side,
        _ => Segment::Back,
    }
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..=hi);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

/// Chains procedural rollouts through random waypoints: forward walks, arcs,
/// turns in place, stops, sidesteps and (rarely) backward steps.
pub fn synth_trajectories(seed: u64, n_sequences: usize, cfg: &SynthConfig) -> Result<TrajectoryDataset> {
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("n_sequences must be positive".into()));
    }
    let fps = cfg.chunk.fps;
    let mut sequences = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let mut rng = rng_stream(seed, s as u64);
        let seconds = rng.random_range(cfg.min_seconds..=cfg.max_seconds);
        let n_frames = (seconds * fps as f64).round() as usize;
        let start = Pose::standing(Vec2::zeros(), rng.random_range(-3.14..3.14));
        let mut seq = vec![start];
        while seq.len() < n_frames {
            let p = *seq.last().unwrap();
            let mut chunk_cfg = cfg.chunk;
            chunk_cfg.gait.v_max *= rng.random_range(0.6..=1.0);
            let seg = pick_segment(&mut rng);
            let (fwd, lat, dyaw) = match seg {
                Segment::Walk => (rng.random_range(0.8..=2.0), rng.random_range(-0.1..=0.1), rng.random_range(-0.2..=0.2)),
                Segment::Arc => {
                    let d = rng.random_range(0.6..=1.5);
                    let dyaw = signed(&mut rng, 0.4, 1.2);
                    (d * (dyaw / 2.0).cos(), d * (dyaw / 2.0).sin(), dyaw)
                }
                Segment::Turn => (0.0, 0.0, signed(&mut rng, 0.5, 2.0)),
                Segment::Stop => (0.0, 0.0, 0.0),
                Segment::Side => (rng.random_range(-0.1..=0.1), signed(&mut rng, 0.3, 0.8), 0.0),
                Segment::Back => (-rng.random_range(0.3..=0.8), 0.0, 0.0),
            };
            let pitch = rng.random_range(-0.3..=0.3);
            let z = rng.random_range(1.5..=1.7);
            if seg == Segment::Stop {
                let hold = rng.random_range(10..=40usize);
                let target = p.head_pose();
                let mut q = p;
                for _ in 0..hold.min(n_frames - seq.len()) {
                    q = kinematic_step(&q, &target, q.head_yaw, q.head_pitch, &chunk_cfg);
                    seq.push(q);
                }
                continue;
            }
            let xy = p.pelvis_xy + rotate2(Vec2::new(fwd, lat), p.pelvis_heading);
            let target = HeadPose::from_yaw_pitch(
                Vec3::new(xy.x, xy.y, z),
                wrap_angle(p.pelvis_heading + dyaw),
                pitch,
            );
            let mut q = p;
            for _ in 0..4 {
                let c = kinematic_rollout(&q, &target, &chunk_cfg)?;
                q = *c.poses.last().unwrap();
                seq.extend(c.poses);
                if c.reached || seq.len() >= n_frames {
                    break;
                }
            }
        }
        seq.truncate(n_frames);
        sequences.push(seq);
    }
    Ok(TrajectoryDataset { fps, sequences })
}
