//! Discrete action set: clustered head-pose changes over one chunk horizon.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{HeadPose, Pose, HEAD_Z_MAX, HEAD_Z_MIN, PITCH_LIMIT};
use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::math::{rng_stream, rotate_z, wrap_angle, yaw_pitch_of, Vec3};

pub const ACTION_FILE_VERSION: u32 = 1;

/// Head motion expressed in the starting head's yaw-aligned frame
/// (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDelta {
    pub translation: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl HeadDelta {
    /// Clustering features; angles count 1 m per radian.
    pub fn features(&self) -> [f64; 5] {
        let t = self.translation;
        [t[0], t[1], t[2], self.yaw, self.pitch]
    }

    pub fn from_features(f: &[f64]) -> Self {
        Self {
            translation: [f[0], f[1], f[2]],
            yaw: f[3],
            pitch: f[4],
        }
    }

    pub fn between(from: &Pose, to: &Pose) -> Self {
        let t = rotate_z(to.head_pos - from.head_pos, -from.head_yaw);
        Self {
            translation: [t.x, t.y, t.z],
            yaw: wrap_angle(to.head_yaw - from.head_yaw),
            pitch: to.head_pitch - from.head_pitch,
        }
    }
}

/// Every head change `T` frames apart, sliding over each sequence.
pub fn extract_head_deltas(ds: &TrajectoryDataset, t_frames: usize) -> Result<Vec<HeadDelta>> {
    if t_frames == 0 {
        return Err(Error::InvalidArgument("t_frames must be positive".into()));
    }
    let out: Vec<HeadDelta> = ds
        .sequences
        .iter()
        .filter(|s| s.len() > t_frames)
        .flat_map(|s| s.windows(t_frames + 1).map(|w| HeadDelta::between(&w[0], &w[t_frames])))
        .collect();
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no sequence longer than {t_frames} frames")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_iter: 300,
            n_init: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment pass of the winning restart.
    pub history: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (i, d) = nearest(p, centroids);
            inertia += d;
            i
        })
        .collect();
    (a, inertia)
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 {
                pick = Some(i);
                if u < *d {
                    break;
                }
                u -= d;
            }
        }
        let c = points[pick.expect("fewer distinct points than clusters")].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let (mut assignments, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Reseed to the point farthest from its centroid, taken from a
            // cluster that can spare it.
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                let d = dist2(p, &centroids[assignments[i]]);
                if counts[assignments[i]] > 1 && d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            let i = far.expect("enough distinct points");
            counts[assignments[i]] -= 1;
            counts[c] = 1;
            assignments[i] = c;
            centroids[c] = points[i].clone();
        }
        let (next, inertia) = assign(points, &centroids);
        history.push(inertia);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    if let Some(inertia) = hartigan(points, &mut assignments, &mut centroids) {
        history.push(inertia);
    }
    let inertia = *history.last().unwrap();
    KMeansResult {
        centroids,
        assignments,
        inertia,
        history,
    }
}

/// Single-point transfers that lower inertia once the centroid shift is
/// accounted for. Runs after Lloyd converges; moving `x` from `a` to `b` gains
/// `n_a/(n_a−1)·|x−c_a|² − n_b/(n_b+1)·|x−c_b|²`. Returns the new inertia if
/// anything moved.
fn hartigan(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) -> Option<f64> {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut moved = false;
    loop {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * dist2(p, &centroids[a]);
            let mut best = None;
            let mut best_gain = 1e-12 * cost_out.max(1e-300);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let gain = cost_out - nb / (nb + 1.0) * dist2(p, &centroids[b]);
                if gain > best_gain {
                    best = Some(b);
                    best_gain = gain;
                }
            }
            if let Some(b) = best {
                let (na, nb) = (counts[a] as f64, counts[b] as f64);
                for (c, v) in centroids[a].iter_mut().zip(p) {
                    *c = (*c * na - v) / (na - 1.0);
                }
                for (c, v) in centroids[b].iter_mut().zip(p) {
                    *c = (*c * nb + v) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignments[i] = b;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        moved = true;
    }
    if !moved {
        return None;
    }
    // Recompute means exactly to shed incremental rounding.
    let dim = points[0].len();
    for (c, centroid) in centroids.iter_mut().enumerate() {
        let mut sum = vec![0.0; dim];
        for (p, _) in points.iter().zip(assignments.iter()).filter(|(_, &a)| a == c) {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        *centroid = sum.iter().map(|s| s / counts[c] as f64).collect();
    }
    Some(points.iter().zip(assignments.iter()).map(|(p, &a)| dist2(p, &centroids[a])).sum())
}

/// Lloyd's algorithm (plus transfer refinement) from k-means++ seeds, best of `n_init` restarts.
/// Nearest-centroid ties go to the lowest index.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if cfg.k == 0 || cfg.n_init == 0 {
        return Err(Error::InvalidArgument("k and n_init must be positive".into()));
    }
    let Some(dim) = points.first().map(Vec::len) else {
        return Err(Error::InvalidArgument("no points".into()));
    };
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("points must be finite and equally sized".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if distinct.len() >= cfg.k {
            break;
        }
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() < cfg.k {
        return Err(Error::InvalidArgument(format!(
            "{} distinct points, need at least {}",
            distinct.len(),
            cfg.k
        )));
    }
    let mut rng = rng_stream(seed, 0);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init {
        let r = lloyd(points, kmeans_pp(points, cfg.k, &mut rng), cfg.max_iter);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.unwrap())
}

/// Applies an action to the current head frame: translation in the head's
/// yaw-aligned frame, height clamped to the head band, pitch to ±45°.
pub fn resolve_action(current: &HeadPose, action: &HeadDelta) -> HeadPose {
    let (yaw, pitch) = yaw_pitch_of(&current.rotation);
    let t = Vec3::from(action.translation);
    let mut translation = current.translation + rotate_z(t, yaw);
    translation.z = translation.z.clamp(HEAD_Z_MIN, HEAD_Z_MAX);
    HeadPose::from_yaw_pitch(
        translation,
        wrap_angle(yaw + action.yaw),
        (pitch + action.pitch).clamp(-PITCH_LIMIT, PITCH_LIMIT),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionProvenance {
    pub dataset_id: String,
    pub seed: u64,
    pub t_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSet {
    pub version: u32,
    pub centroids: Vec<HeadDelta>,
    pub provenance: ActionProvenance,
}

impl ActionSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ACTION_FILE_VERSION {
            return Err(Error::Version {
                what: "action set",
                found: self.version,
                expected: ACTION_FILE_VERSION,
            });
        }
        if self.centroids.len() < 2 {
            return Err(Error::validation("centroids", "need at least 2 actions"));
        }
        for (i, c) in self.centroids.iter().enumerate() {
            if !c.features().iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!("centroids[{i}]"), "non-finite value"));
            }
            if self.centroids[..i].contains(c) {
                return Err(Error::validation(format!("centroids[{i}]"), "duplicate centroid"));
            }
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("action set serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical file bytes, hex.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_string().as_bytes()))
    }

    pub fn from_str(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::parse("action set", e))?;
        if let Some(found) = v.get("version").and_then(|v| v.as_u64()) {
            if found != ACTION_FILE_VERSION as u64 {
                return Err(Error::Version {
                    what: "action set",
                    found: found as u32,
                    expected: ACTION_FILE_VERSION,
                });
            }
        }
        let set: Self = serde_json::from_value(v).map_err(|e| Error::parse("action set", e))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&s)
    }
}

pub fn build_action_set(ds: &TrajectoryDataset, t_frames: usize, cfg: &KMeansConfig, seed: u64) -> Result<ActionSet> {
    let deltas = extract_head_deltas(ds, t_frames)?;
    let points: Vec<Vec<f64>> = deltas.iter().map(|d| d.features().to_vec()).collect();
    let km = kmeans(&points, cfg, seed)?;
    let set = ActionSet {
        version: ACTION_FILE_VERSION,
        centroids: km.centroids.iter().map(|c| HeadDelta::from_features(c)).collect(),
        provenance: ActionProvenance {
            dataset_id: ds.id(),
            seed,
            t_frames,
        },
    };
    set.validate()?;
    Ok(set)
}
