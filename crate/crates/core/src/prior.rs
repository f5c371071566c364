//! Conditional VAE over per-frame pose deltas.
//!
//! Encoder: `[delta, cond] → 128 → 128 → [mu, logvar]`, decoder:
//! `[z, cond] → 128 → 128 → delta`, tanh hidden units, f64 throughout.
//! Deltas are divided by a per-dimension scale before entering the network,
//! so an all-zero network decodes to a zero delta.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::{apply_delta, head_reached, HeadPose, MotionChunk, Pose, PoseDelta, DELTA_DIM};
use crate::dataset::{Reader, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::gait::{check_target, clamp_step, ChunkConfig, MotionPrior};
use crate::math::{rng_stream, rotate_z, Vec3};
use crate::nn::{sgd_momentum, tanh_backward, tanh_inplace, Dense};

pub const COND_DIM: usize = 7;
pub const VAE_FILE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EVAE";

/// What the prior is asked to reach, seen from the current pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTargetEncoding {
    /// Target head position minus current head position, pelvis frame.
    pub translation: Vec3,
    /// Target forward axis, pelvis frame.
    pub forward: Vec3,
    /// Frames left in the chunk divided by the chunk length.
    pub remaining: f64,
}

impl HeadTargetEncoding {
    pub fn new(p: &Pose, target: &HeadPose, remaining_frames: usize, t_frames: usize) -> Self {
        let h = p.pelvis_heading;
        Self {
            translation: rotate_z(target.translation - p.head_pos, -h),
            forward: rotate_z(target.forward(), -h),
            remaining: remaining_frames as f64 / t_frames as f64,
        }
    }

    pub fn to_array(&self) -> [f64; COND_DIM] {
        let (t, f) = (&self.translation, &self.forward);
        [t.x, t.y, t.z, f.x, f.y, f.z, self.remaining]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeShape {
    pub delta_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for VaeShape {
    fn default() -> Self {
        Self {
            delta_dim: DELTA_DIM,
            cond_dim: COND_DIM,
            hidden: 128,
            latent: 16,
        }
    }
}

struct Layers {
    enc1: Dense,
    enc2: Dense,
    enc_out: Dense,
    dec1: Dense,
    dec2: Dense,
    dec_out: Dense,
}

impl VaeShape {
    fn layers(&self) -> Layers {
        let mut offset = 0;
        let mut next = |input, output| {
            let d = Dense { input, output, offset };
            offset += d.n_params();
            d
        };
        Layers {
            enc1: next(self.delta_dim + self.cond_dim, self.hidden),
            enc2: next(self.hidden, self.hidden),
            enc_out: next(self.hidden, 2 * self.latent),
            dec1: next(self.latent + self.cond_dim, self.hidden),
            dec2: next(self.hidden, self.hidden),
            dec_out: next(self.hidden, self.delta_dim),
        }
    }

    pub fn n_params(&self) -> usize {
        let l = self.layers();
        l.dec_out.offset + l.dec_out.n_params()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub shape: VaeShape,
    pub params: Vec<f64>,
    /// Per-dimension divisor applied to deltas before encoding.
    pub delta_scale: Vec<f64>,
}

fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * (da + db));
    for i in 0..batch {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    out
}

/// Intermediate activations kept for backprop.
struct DecoderTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl VaeParams {
    pub fn zeros(shape: VaeShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.n_params()],
            delta_scale: vec![1.0; shape.delta_dim],
        }
    }

    pub fn init(shape: VaeShape, rng: &mut ChaCha8Rng) -> Self {
        let mut v = Self::zeros(shape);
        let l = shape.layers();
        for d in [l.enc1, l.enc2, l.enc_out, l.dec1, l.dec2, l.dec_out] {
            d.init(&mut v.params, rng);
        }
        v
    }

    fn check(&self, x: &[f64], width: usize, cond: &[f64], batch: usize) -> Result<()> {
        if x.len() != batch * width || cond.len() != batch * self.shape.cond_dim {
            return Err(Error::Shape(format!(
                "expected {batch}×{width} inputs and {batch}×{} conditions, got {} and {}",
                self.shape.cond_dim,
                x.len(),
                cond.len()
            )));
        }
        Ok(())
    }

    fn encoder(&self, x: &[f64], cond: &[f64], batch: usize) -> [Vec<f64>; 4] {
        let l = self.shape.layers();
        let input = concat_rows(x, self.shape.delta_dim, cond, self.shape.cond_dim, batch);
        let mut h1 = l.enc1.forward(&self.params, &input, batch);
        tanh_inplace(&mut h1);
        let mut h2 = l.enc2.forward(&self.params, &h1, batch);
        tanh_inplace(&mut h2);
        let out = l.enc_out.forward(&self.params, &h2, batch);
        [input, h1, h2, out]
    }

    fn decoder(&self, z: &[f64], cond: &[f64], batch: usize) -> DecoderTrace {
        let l = self.shape.layers();
        let input = concat_rows(z, self.shape.latent, cond, self.shape.cond_dim, batch);
        let mut h1 = l.dec1.forward(&self.params, &input, batch);
        tanh_inplace(&mut h1);
        let mut h2 = l.dec2.forward(&self.params, &h1, batch);
        tanh_inplace(&mut h2);
        let out = l.dec_out.forward(&self.params, &h2, batch);
        DecoderTrace { input, h1, h2, out }
    }

    /// Batched encoder on normalized deltas; returns `(mu, logvar)`, each `batch × latent`.
    pub fn encode_batch(&self, x: &[f64], cond: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(x, self.shape.delta_dim, cond, batch)?;
        let [.., out] = self.encoder(x, cond, batch);
        Ok(split_mu_logvar(&out, self.shape.latent))
    }

    /// Batched decoder; returns normalized deltas, `batch × delta_dim`.
    pub fn decode_batch(&self, z: &[f64], cond: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check(z, self.shape.latent, cond, batch)?;
        Ok(self.decoder(z, cond, batch).out)
    }

    pub fn normalize(&self, delta: &PoseDelta) -> Vec<f64> {
        delta.to_array().iter().zip(&self.delta_scale).map(|(v, s)| v / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> PoseDelta {
        let v: Vec<f64> = x.iter().zip(&self.delta_scale).map(|(v, s)| v * s).collect();
        PoseDelta::from_slice(&v)
    }

    pub fn encode(&self, delta: &PoseDelta, cond: &HeadTargetEncoding) -> Result<(Vec<f64>, Vec<f64>)> {
        self.encode_batch(&self.normalize(delta), &cond.to_array(), 1)
    }

    pub fn decode(&self, z: &[f64], cond: &HeadTargetEncoding) -> Result<PoseDelta> {
        let out = self.decode_batch(z, &cond.to_array(), 1)?;
        Ok(self.denormalize(&out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Header: magic, version, delta/cond/hidden/latent dims, parameter count;
    /// then `delta_dim` scale values and the parameters as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = MAGIC.to_vec();
        for v in [VAE_FILE_VERSION, s.delta_dim as u32, s.cond_dim as u32, s.hidden as u32, s.latent as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in self.delta_scale.iter().chain(&self.params) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::parse("prior checkpoint", "bad magic"));
        }
        let version = rd.u32()?;
        if version != VAE_FILE_VERSION {
            return Err(Error::Version {
                what: "prior checkpoint",
                found: version,
                expected: VAE_FILE_VERSION,
            });
        }
        let shape = VaeShape {
            delta_dim: rd.u32()? as usize,
            cond_dim: rd.u32()? as usize,
            hidden: rd.u32()? as usize,
            latent: rd.u32()? as usize,
        };
        if shape.delta_dim != DELTA_DIM || shape.cond_dim != COND_DIM || shape.hidden == 0 || shape.latent == 0 {
            return Err(Error::Shape(format!("unsupported prior shape {shape:?}")));
        }
        let n = rd.u32()? as usize;
        if n != shape.n_params() {
            return Err(Error::Shape(format!("{n} parameters, shape needs {}", shape.n_params())));
        }
        let mut read = |k: usize| -> Result<Vec<f64>> { (0..k).map(|_| rd.f32().map(f64::from)).collect() };
        let delta_scale = read(shape.delta_dim)?;
        let params = read(n)?;
        if rd.pos != bytes.len() {
            return Err(Error::parse("prior checkpoint", "trailing bytes"));
        }
        if delta_scale.iter().chain(&params).any(|v| !v.is_finite()) || delta_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::NonFinite("prior checkpoint values".into()));
        }
        Ok(Self { shape, params, delta_scale })
    }
}

fn split_mu_logvar(out: &[f64], latent: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(out.len() / 2);
    let mut lv = Vec::with_capacity(out.len() / 2);
    for row in out.chunks_exact(2 * latent) {
        mu.extend_from_slice(&row[..latent]);
        lv.extend_from_slice(&row[latent..]);
    }
    (mu, lv)
}

/// `z = mu + exp(logvar/2)·noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter().zip(logvar).zip(noise).map(|((m, lv), e)| m + (lv / 2.0).exp() * e).collect()
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>()
}

/// One minibatch of normalized deltas, conditions and reparameterization noise.
#[derive(Debug, Clone)]
pub struct ElboBatch {
    pub deltas: Vec<f64>,
    pub conds: Vec<f64>,
    pub noise: Vec<f64>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grads: Vec<f64>,
}

/// Loss = batch mean of (per-dimension MSE + β·KL), with its gradient.
pub fn elbo_loss_grad(vae: &VaeParams, batch: &ElboBatch, beta: f64) -> Result<ElboOutput> {
    let s = vae.shape;
    let n = batch.len;
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    vae.check(&batch.deltas, s.delta_dim, &batch.conds, n)?;
    if batch.noise.len() != n * s.latent {
        return Err(Error::Shape(format!("noise has {} values, expected {}", batch.noise.len(), n * s.latent)));
    }
    let l = s.layers();
    let p = &vae.params;
    let [e_in, e_h1, e_h2, e_out] = vae.encoder(&batch.deltas, &batch.conds, n);
    let (mu, lv) = split_mu_logvar(&e_out, s.latent);
    let z = reparameterize(&mu, &lv, &batch.noise);
    let dec = vae.decoder(&z, &batch.conds, n);

    let nf = n as f64;
    let d = s.delta_dim as f64;
    let mut recon = 0.0;
    let mut d_out = vec![0.0; dec.out.len()];
    for ((g, y), x) in d_out.iter_mut().zip(&dec.out).zip(&batch.deltas) {
        let r = y - x;
        recon += r * r;
        *g = 2.0 * r / (d * nf);
    }
    recon /= d * nf;
    let kl = kl_divergence(&mu, &lv) / nf;
    let loss = recon + beta * kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("elbo loss (recon {recon}, kl {kl})")));
    }

    let mut grads = vec![0.0; p.len()];
    let mut dh2 = l.dec_out.backward(p, &dec.h2, &d_out, n, &mut grads, true).unwrap();
    tanh_backward(&dec.h2, &mut dh2);
    let mut dh1 = l.dec2.backward(p, &dec.h1, &dh2, n, &mut grads, true).unwrap();
    tanh_backward(&dec.h1, &mut dh1);
    let d_in = l.dec1.backward(p, &dec.input, &dh1, n, &mut grads, true).unwrap();

    let w = s.latent + s.cond_dim;
    let mut d_enc = vec![0.0; n * 2 * s.latent];
    for i in 0..n {
        for j in 0..s.latent {
            let k = i * s.latent + j;
            let dz = d_in[i * w + j];
            let sd = (lv[k] / 2.0).exp();
            d_enc[i * 2 * s.latent + j] = dz + beta * mu[k] / nf;
            d_enc[i * 2 * s.latent + s.latent + j] =
                dz * batch.noise[k] * 0.5 * sd + beta * 0.5 * (lv[k].exp() - 1.0) / nf;
        }
    }
    let mut dh2 = l.enc_out.backward(p, &e_h2, &d_enc, n, &mut grads, true).unwrap();
    tanh_backward(&e_h2, &mut dh2);
    let mut dh1 = l.enc2.backward(p, &e_h1, &dh2, n, &mut grads, true).unwrap();
    tanh_backward(&e_h1, &mut dh1);
    l.enc1.backward(p, &e_in, &dh1, n, &mut grads, false);

    Ok(ElboOutput { loss, recon, kl, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub t_frames: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 128,
            beta: 1e-3,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            batch: 64,
            t_frames: 30,
        }
    }
}

/// Gradient step with momentum; parameters are untouched if the loss is not finite.
pub fn elbo_step(vae: &mut VaeParams, velocity: &mut [f64], batch: &ElboBatch, cfg: &VaeTrainConfig) -> Result<ElboOutput> {
    let out = elbo_loss_grad(vae, batch, cfg.beta)?;
    sgd_momentum(&mut vae.params, velocity, &out.grads, cfg.lr, cfg.momentum);
    Ok(out)
}

/// Raw training pairs: one per frame transition, with a target `k ∈ [1, T]`
/// frames ahead (bounded by the sequence end) and `remaining = k`.
pub fn training_pairs(ds: &TrajectoryDataset, t_frames: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; DELTA_DIM]>, Vec<[f64; COND_DIM]>) {
    let mut deltas = Vec::new();
    let mut conds = Vec::new();
    for seq in &ds.sequences {
        for t in 0..seq.len().saturating_sub(1) {
            let k = rng.random_range(1..=t_frames).min(seq.len() - 1 - t);
            deltas.push(PoseDelta::between(&seq[t], &seq[t + 1]).to_array());
            let enc = HeadTargetEncoding::new(&seq[t], &seq[t + k].head_pose(), k, t_frames);
            conds.push(enc.to_array());
        }
    }
    (deltas, conds)
}

/// Trains from scratch; returns the model and the mean loss of each epoch.
pub fn train_vae(ds: &TrajectoryDataset, cfg: &VaeTrainConfig, seed: u64) -> Result<(VaeParams, Vec<f64>)> {
    if cfg.batch == 0 || cfg.t_frames == 0 {
        return Err(Error::InvalidArgument("batch and t_frames must be positive".into()));
    }
    let mut rng = rng_stream(seed, 0);
    let (deltas, conds) = training_pairs(ds, cfg.t_frames, &mut rng);
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("dataset has no frame pairs".into()));
    }
    let shape = VaeShape {
        hidden: cfg.hidden,
        latent: cfg.latent_dim,
        ..VaeShape::default()
    };
    let mut vae = VaeParams::init(shape, &mut rng);
    for (j, s) in vae.delta_scale.iter_mut().enumerate() {
        let ms = deltas.iter().map(|d| d[j] * d[j]).sum::<f64>() / deltas.len() as f64;
        *s = ms.sqrt().max(1e-6);
    }
    let mut velocity = vec![0.0; vae.params.len()];
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let mut batch = ElboBatch {
                deltas: Vec::with_capacity(idx.len() * DELTA_DIM),
                conds: Vec::with_capacity(idx.len() * COND_DIM),
                noise: Vec::with_capacity(idx.len() * shape.latent),
                len: idx.len(),
            };
            for &i in idx {
                batch.deltas.extend(deltas[i].iter().zip(&vae.delta_scale).map(|(v, s)| v / s));
                batch.conds.extend_from_slice(&conds[i]);
            }
            batch.noise.extend((0..idx.len() * shape.latent).map(|_| rng.sample::<f64, _>(StandardNormal)));
            total += elbo_step(&mut vae, &mut velocity, &batch, cfg)?.loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok((vae, losses))
}

/// Autoregressive decoding, each frame clamped to the same rate limits as
/// the procedural gait. Latents are `temperature · N(0, I)` per frame; at
/// temperature 0 the decoder runs on the prior mean and `rng` is unused.
pub fn vae_rollout(
    vae: &VaeParams,
    p0: &Pose,
    target: &HeadPose,
    cfg: &ChunkConfig,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MotionChunk> {
    check_target(target)?;
    let g = &cfg.gait;
    let dt = cfg.dt();
    let mut p = *p0;
    let mut poses = Vec::with_capacity(cfg.t_frames);
    let mut reached = false;
    if head_reached(p0, target, &cfg.reach) {
        p = apply_delta(&p, &PoseDelta::default());
        poses.push(p);
        reached = true;
    } else {
        let mut z = vec![0.0; vae.shape.latent];
        for f in 0..cfg.t_frames {
            if temperature > 0.0 {
                for v in z.iter_mut() {
                    *v = temperature * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let cond = HeadTargetEncoding::new(&p, target, cfg.t_frames - f, cfg.t_frames);
            let mut d = vae.decode(&z, &cond)?;
            d.pelvis = clamp_step(d.pelvis, 0.0, g, dt);
            d.heading = d.heading.clamp(-g.omega_max * dt, g.omega_max * dt);
            d.head_yaw = d.head_yaw.clamp(-g.head_omega * dt, g.head_omega * dt);
            d.head_pitch = d.head_pitch.clamp(-g.head_omega * dt, g.head_omega * dt);
            d.head.z = d.head.z.clamp(-g.head_z_speed * dt, g.head_z_speed * dt);
            let mut q = apply_delta(&p, &d);
            q.head_pos.x = q.pelvis_xy.x;
            q.head_pos.y = q.pelvis_xy.y;
            q.clamp_to_limits();
            if !q.to_row().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("decoded pose".into()));
            }
            p = q;
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

/// The learned prior behind the common rollout interface.
#[derive(Debug, Clone)]
pub struct VaePrior {
    pub params: VaeParams,
    pub temperature: f64,
}

impl MotionPrior for VaePrior {
    fn rollout(&self, p0: &Pose, target: &HeadPose, cfg: &ChunkConfig, rng: &mut ChaCha8Rng) -> Result<MotionChunk> {
        vae_rollout(&self.params, p0, target, cfg, self.temperature, rng)
    }
}
