//! Value function and DQN machinery: Q models, prioritized replay,
//! double-DQN targets, Huber loss, momentum SGD and checkpoints.

use std::path::Path;
use std::sync::Arc;

use num_traits::Zero;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Reader;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, sgd_momentum, Conv3x3s2, Dense, Scalar};

/// Forward/backward interface shared by the conv network and the linear
/// model used on tabular harnesses.
pub trait QModel: Clone + Send + Sync {
    type F: Scalar;
    type Cache;

    fn input_len(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn params(&self) -> &[Self::F];
    fn params_mut(&mut self) -> &mut [Self::F];
    /// `batch × n_actions` values.
    fn forward(&self, x: &[Self::F], batch: usize) -> Vec<Self::F>;
    fn forward_train(&self, x: &[Self::F], batch: usize) -> (Vec<Self::F>, Self::Cache);
    /// Accumulates `dL/dθ` into `grads` given `dL/dQ`.
    fn backward(&self, cache: &Self::Cache, d_out: &[Self::F], grads: &mut [Self::F]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetShape {
    pub in_c: usize,
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

impl QNetShape {
    pub fn new(in_c: usize, height: usize, width: usize, n_actions: usize) -> Self {
        Self {
            in_c,
            height,
            width,
            c1: 16,
            c2: 32,
            hidden: 256,
            n_actions,
        }
    }

    fn layers(&self) -> (Conv3x3s2, Conv3x3s2, Dense, Dense) {
        let conv1 = Conv3x3s2 {
            in_c: self.in_c,
            out_c: self.c1,
            in_h: self.height,
            in_w: self.width,
            offset: 0,
        };
        let conv2 = Conv3x3s2 {
            in_c: self.c1,
            out_c: self.c2,
            in_h: conv1.out_h(),
            in_w: conv1.out_w(),
            offset: conv1.n_params(),
        };
        let fc1 = Dense {
            input: conv2.out_len(),
            output: self.hidden,
            offset: conv2.offset + conv2.n_params(),
        };
        let fc2 = Dense {
            input: self.hidden,
            output: self.n_actions,
            offset: fc1.offset + fc1.n_params(),
        };
        (conv1, conv2, fc1, fc2)
    }

    pub fn n_params(&self) -> usize {
        let (.., fc2) = self.layers();
        fc2.offset + fc2.n_params()
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.in_c, self.height, self.width, self.c1, self.c2, self.hidden, self.n_actions];
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }
}

/// conv 3×3/2 → ReLU → conv 3×3/2 → ReLU → dense → ReLU → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvQNet<F> {
    pub shape: QNetShape,
    pub params: Vec<F>,
}

pub struct ConvCache<F> {
    cols1: Vec<F>,
    a1: Vec<F>,
    cols2: Vec<F>,
    a2: Vec<F>,
    h: Vec<F>,
    batch: usize,
}

impl<F: Scalar> ConvQNet<F> {
    pub fn zeros(shape: QNetShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            params: vec![F::zero(); shape.n_params()],
        })
    }

    pub fn init(shape: QNetShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let (c1, c2, f1, f2) = shape.layers();
        c1.init(&mut net.params, rng);
        c2.init(&mut net.params, rng);
        f1.init(&mut net.params, rng);
        f2.init(&mut net.params, rng);
        Ok(net)
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> ConvQNet<G> {
        ConvQNet {
            shape: self.shape,
            params: self.params.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}

impl<F: Scalar> QModel for ConvQNet<F> {
    type F = F;
    type Cache = ConvCache<F>;

    fn input_len(&self) -> usize {
        self.shape.in_c * self.shape.height * self.shape.width
    }

    fn n_actions(&self) -> usize {
        self.shape.n_actions
    }

    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn forward(&self, x: &[F], batch: usize) -> Vec<F> {
        self.forward_train(x, batch).0
    }

    fn forward_train(&self, x: &[F], batch: usize) -> (Vec<F>, ConvCache<F>) {
        assert_eq!(x.len(), batch * self.input_len(), "observation batch size");
        let (c1, c2, f1, f2) = self.shape.layers();
        let p = &self.params;
        let (mut a1, cols1) = c1.forward(p, x, batch);
        relu_inplace(&mut a1);
        let (mut a2, cols2) = c2.forward(p, &a1, batch);
        relu_inplace(&mut a2);
        let mut h = f1.forward(p, &a2, batch);
        relu_inplace(&mut h);
        let q = f2.forward(p, &h, batch);
        (q, ConvCache { cols1, a1, cols2, a2, h, batch })
    }

    fn backward(&self, c: &ConvCache<F>, d_out: &[F], grads: &mut [F]) {
        let (c1, c2, f1, f2) = self.shape.layers();
        let p = &self.params;
        let mut dh = f2.backward(p, &c.h, d_out, c.batch, grads, true).unwrap();
        relu_backward(&c.h, &mut dh);
        let mut da2 = f1.backward(p, &c.a2, &dh, c.batch, grads, true).unwrap();
        relu_backward(&c.a2, &mut da2);
        let mut da1 = c2.backward(p, &c.cols2, &da2, c.batch, grads, true).unwrap();
        relu_backward(&c.a1, &mut da1);
        c1.backward(p, &c.cols1, &da1, c.batch, grads, false);
    }
}

/// `Q = W·x + b`; with one-hot inputs this is a lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQ<F> {
    pub layer: Dense,
    pub params: Vec<F>,
}

impl<F: Scalar> LinearQ<F> {
    pub fn zeros(input: usize, n_actions: usize) -> Self {
        let layer = Dense {
            input,
            output: n_actions,
            offset: 0,
        };
        Self {
            layer,
            params: vec![F::zero(); layer.n_params()],
        }
    }
}

impl<F: Scalar> QModel for LinearQ<F> {
    type F = F;
    type Cache = (Vec<F>, usize);

    fn input_len(&self) -> usize {
        self.layer.input
    }

    fn n_actions(&self) -> usize {
        self.layer.output
    }

    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn forward(&self, x: &[F], batch: usize) -> Vec<F> {
        self.layer.forward(&self.params, x, batch)
    }

    fn forward_train(&self, x: &[F], batch: usize) -> (Vec<F>, Self::Cache) {
        (self.forward(x, batch), (x.to_vec(), batch))
    }

    fn backward(&self, cache: &Self::Cache, d_out: &[F], grads: &mut [F]) {
        self.layer.backward(&self.params, &cache.0, d_out, cache.1, grads, false);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn q_forward<M: QModel>(model: &M, obs: &[M::F]) -> Result<Vec<M::F>> {
    if obs.len() != model.input_len() {
        return Err(Error::Shape(format!("observation has {} values, model expects {}", obs.len(), model.input_len())));
    }
    Ok(model.forward(obs, 1))
}

/// ε-greedy. One uniform draw decides exploration, a second picks the
/// random action, so the RNG stream advances the same way for every `eps`.
pub fn select_action<M: QModel>(model: &M, obs: &[M::F], eps: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let u: f64 = rng.random();
    if u < eps {
        return Ok(rng.random_range(0..model.n_actions()));
    }
    Ok(argmax(&q_forward(model, obs)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsStorage {
    #[default]
    F32,
    /// Per-channel affine 8-bit quantization, dequantized on sample.
    U8,
}

#[derive(Debug)]
enum ObsData {
    F32(Vec<f32>),
    U8 { lo: Vec<f32>, step: Vec<f32>, data: Vec<u8> },
}

/// Replay copy of an observation; cheap to clone so consecutive transitions
/// can share the frame between them.
#[derive(Debug, Clone)]
pub struct StoredObs(Arc<ObsData>);

impl StoredObs {
    pub fn new(values: &[f32], channels: usize, storage: ObsStorage) -> Self {
        match storage {
            ObsStorage::F32 => Self(Arc::new(ObsData::F32(values.to_vec()))),
            ObsStorage::U8 => {
                let plane = values.len() / channels.max(1);
                let mut lo = Vec::with_capacity(channels);
                let mut step = Vec::with_capacity(channels);
                let mut data = Vec::with_capacity(values.len());
                for ch in values.chunks(plane.max(1)) {
                    let min = ch.iter().copied().fold(f32::INFINITY, f32::min);
                    let max = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let s = if max > min { (max - min) / 255.0 } else { 0.0 };
                    data.extend(ch.iter().map(|v| if s > 0.0 { ((v - min) / s).round() as u8 } else { 0 }));
                    lo.push(min);
                    step.push(s);
                }
                Self(Arc::new(ObsData::U8 { lo, step, data }))
            }
        }
    }

    pub fn len(&self) -> usize {
        match &*self.0 {
            ObsData::F32(v) => v.len(),
            ObsData::U8 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_to<F: Scalar>(&self, out: &mut [F]) {
        match &*self.0 {
            ObsData::F32(v) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = F::of(*x as f64);
                }
            }
            ObsData::U8 { lo, step, data } => {
                let plane = data.len() / lo.len();
                for (c, (l, s)) in lo.iter().zip(step).enumerate() {
                    let range = c * plane..(c + 1) * plane;
                    for (o, q) in out[range.clone()].iter_mut().zip(&data[range]) {
                        *o = F::of((l + s * *q as f32) as f64);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: StoredObs,
    pub action: usize,
    pub reward: f64,
    pub next_obs: StoredObs,
    pub done: bool,
}

/// Sum tree over `p^α` leaves plus the ring buffer of items.
///
/// Leaf count is the next power of two above the ring size; unused leaves
/// stay at zero and are never sampled.
#[derive(Debug, Clone)]
pub struct SumTree<T> {
    leaves: usize,
    ring: usize,
    nodes: Vec<f64>,
    items: Vec<Option<T>>,
    cursor: usize,
    len: usize,
    alpha: f64,
    max_priority: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSample {
    pub indices: Vec<usize>,
    pub is_weights: Vec<f64>,
}

impl<T> SumTree<T> {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 || !(alpha >= 0.0) {
            return Err(Error::InvalidArgument("replay capacity must be positive and alpha non-negative".into()));
        }
        let leaves = capacity.next_power_of_two();
        Ok(Self {
            leaves,
            ring: capacity,
            nodes: vec![0.0; 2 * leaves],
            items: (0..capacity).map(|_| None).collect(),
            cursor: 0,
            len: 0,
            alpha,
            max_priority: 1.0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.ring
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Stored `p^α` of slot `i`.
    pub fn leaf(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i).and_then(Option::as_ref)
    }

    fn set_leaf(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Stores `item` with raw priority `priority` (> 0), overwriting the
    /// oldest slot when full. Returns the slot index.
    pub fn push(&mut self, item: T, priority: f64) -> Result<usize> {
        if !(priority > 0.0) || !priority.is_finite() {
            return Err(Error::InvalidArgument(format!("priority must be positive, got {priority}")));
        }
        let i = self.cursor;
        self.items[i] = Some(item);
        self.set_leaf(i, priority.powf(self.alpha));
        self.max_priority = self.max_priority.max(priority);
        self.cursor = (self.cursor + 1) % self.ring;
        self.len = (self.len + 1).min(self.ring);
        Ok(i)
    }

    /// Leaf whose cumulative-priority interval contains `u ∈ [0, total)`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let (l, r) = (self.nodes[2 * n], self.nodes[2 * n + 1]);
            if (u < l && l > 0.0) || r <= 0.0 {
                n *= 2;
            } else {
                u -= l;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }

    /// Independent proportional draws. Importance weights are
    /// `(len·P(i))^(−β)` divided by the largest weight in the batch.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<PerSample> {
        if self.len == 0 || self.total() <= 0.0 {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        let total = self.total();
        let mut indices = Vec::with_capacity(batch);
        let mut is_weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = self.find(rng.random::<f64>() * total);
            let prob = self.leaf(i) / total;
            indices.push(i);
            is_weights.push((self.len as f64 * prob).powf(-beta));
        }
        let max = is_weights.iter().copied().fold(0.0, f64::max);
        for w in &mut is_weights {
            *w /= max;
        }
        Ok(PerSample { indices, is_weights })
    }

    /// Sets raw priorities `|td| + eps` for previously sampled slots.
    pub fn update(&mut self, indices: &[usize], td_errors: &[f64], eps: f64) -> Result<()> {
        for (&i, td) in indices.iter().zip(td_errors) {
            if i >= self.ring || self.items[i].is_none() {
                return Err(Error::InvalidArgument(format!("slot {i} is empty")));
            }
            let p = td.abs() + eps;
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("priority for slot {i}")));
            }
            self.set_leaf(i, p.powf(self.alpha));
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }

    /// Largest relative mismatch between an internal node and the sum of its children.
    pub fn consistency_error(&self) -> f64 {
        (1..self.leaves)
            .map(|n| {
                let s = self.nodes[2 * n] + self.nodes[2 * n + 1];
                (self.nodes[n] - s).abs() / s.abs().max(1e-300)
            })
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub batch: usize,
    pub buffer: usize,
    pub target_update: u64,
    pub double_q: bool,
    pub total_steps: u64,
    pub per_alpha: f64,
    pub per_beta0: f64,
    pub per_eps: f64,
    pub momentum: f64,
    pub huber_delta: f64,
    pub storage: ObsStorage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_steps: 2000,
            batch: 64,
            buffer: 20000,
            target_update: 500,
            double_q: true,
            total_steps: 30000,
            per_alpha: 0.6,
            per_beta0: 0.4,
            per_eps: 1e-3,
            momentum: 0.9,
            huber_delta: 1.0,
            storage: ObsStorage::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lr", self.lr),
            ("huber_delta", self.huber_delta),
            ("per_eps", self.per_eps),
        ];
        for (f, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(f, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::validation("gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eps_end) || !(self.eps_end..=1.0).contains(&self.eps_start) {
            return Err(Error::validation("eps_end", "need 0 ≤ eps_end ≤ eps_start ≤ 1"));
        }
        if self.batch == 0 || self.buffer < self.batch {
            return Err(Error::validation("buffer", "need 0 < batch ≤ buffer"));
        }
        if self.target_update == 0 || self.total_steps == 0 {
            return Err(Error::validation("target_update", "target_update and total_steps must be positive"));
        }
        if self.per_alpha < 0.0 || !(0.0..=1.0).contains(&self.per_beta0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("per_alpha", "PER exponents or momentum out of range"));
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`.
pub fn epsilon(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.eps_decay_steps {
        return cfg.eps_end;
    }
    let f = step as f64 / cfg.eps_decay_steps as f64;
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * f
}

/// Importance exponent annealed linearly to 1 over the run.
pub fn per_beta(step: u64, cfg: &TrainConfig) -> f64 {
    let f = (step as f64 / cfg.total_steps as f64).min(1.0);
    cfg.per_beta0 + (1.0 - cfg.per_beta0) * f
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// Bootstrapped targets for a batch of next observations.
pub fn td_targets<M: QModel>(
    online: &M,
    target: &M,
    next_obs: &[M::F],
    rewards: &[f64],
    dones: &[bool],
    gamma: f64,
    double_q: bool,
) -> Vec<f64> {
    let n = rewards.len();
    let na = online.n_actions();
    let q_target = target.forward(next_obs, n);
    let q_online = if double_q { online.forward(next_obs, n) } else { Vec::new() };
    (0..n)
        .map(|i| {
            if dones[i] {
                return rewards[i];
            }
            let row = &q_target[i * na..(i + 1) * na];
            let next = if double_q {
                row[argmax(&q_online[i * na..(i + 1) * na])]
            } else {
                row[argmax(row)]
            };
            rewards[i] + gamma * next.f64()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLossGrad<F> {
    pub loss: f64,
    pub grads: Vec<F>,
    /// `target − Q(s, a)` per item.
    pub td: Vec<f64>,
    pub q_taken: Vec<f64>,
}

/// Importance-weighted Huber loss summed over the batch against fixed
/// targets, and its gradient.
pub fn q_loss_grad<M: QModel>(
    model: &M,
    obs: &[M::F],
    actions: &[usize],
    targets: &[f64],
    weights: &[f64],
    delta: f64,
) -> QLossGrad<M::F> {
    let n = actions.len();
    let na = model.n_actions();
    let (q, cache) = model.forward_train(obs, n);
    let mut d_out = vec![M::F::zero(); q.len()];
    let mut loss = 0.0;
    let mut td = Vec::with_capacity(n);
    let mut q_taken = Vec::with_capacity(n);
    for i in 0..n {
        let qa = q[i * na + actions[i]].f64();
        let err = qa - targets[i];
        loss += weights[i] * huber(err, delta);
        d_out[i * na + actions[i]] = M::F::of(weights[i] * huber_grad(err, delta));
        td.push(-err);
        q_taken.push(qa);
    }
    let mut grads = vec![M::F::zero(); model.params().len()];
    model.backward(&cache, &d_out, &mut grads);
    QLossGrad {
        loss: loss,
        grads,
        td,
        q_taken,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub mean_q: f64,
    pub mean_td: f64,
}

/// Online/target pair, optimizer state and replay.
#[derive(Debug, Clone)]
pub struct Learner<M: QModel> {
    pub online: M,
    pub target: M,
    pub velocity: Vec<M::F>,
    pub replay: SumTree<Transition>,
    pub cfg: TrainConfig,
    /// Gradient steps taken.
    pub updates: u64,
}

impl<M: QModel> Learner<M> {
    pub fn new(online: M, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            target: online.clone(),
            velocity: vec![M::F::zero(); online.params().len()],
            replay: SumTree::new(cfg.buffer, cfg.per_alpha)?,
            online,
            cfg,
            updates: 0,
        })
    }

    /// New transitions enter at the largest priority seen so far.
    pub fn observe(&mut self, t: Transition) -> Result<()> {
        if t.action >= self.online.n_actions() || !t.reward.is_finite() {
            return Err(Error::InvalidArgument(format!("bad transition: action {} reward {}", t.action, t.reward)));
        }
        let p = self.replay.max_priority();
        self.replay.push(t, p).map(|_| ())
    }

    pub fn ready(&self) -> bool {
        self.replay.len() >= self.cfg.batch
    }

    pub fn sync_target(&mut self) {
        self.target.params_mut().copy_from_slice(self.online.params());
    }

    pub fn train_step(&mut self, rng: &mut ChaCha8Rng) -> Result<StepMetrics> {
        if !self.ready() {
            return Err(Error::InvalidArgument(format!(
                "replay holds {} transitions, batch needs {}",
                self.replay.len(),
                self.cfg.batch
            )));
        }
        let cfg = self.cfg;
        let n = cfg.batch;
        let len = self.online.input_len();
        let sample = self.replay.sample(n, per_beta(self.updates, &cfg), rng)?;
        let mut obs = vec![M::F::zero(); n * len];
        let mut next = vec![M::F::zero(); n * len];
        let mut actions = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for (k, &i) in sample.indices.iter().enumerate() {
            let t = self.replay.get(i).expect("sampled slot is filled");
            if t.obs.len() != len || t.next_obs.len() != len {
                return Err(Error::Shape(format!("stored observation has {} values, model expects {len}", t.obs.len())));
            }
            t.obs.write_to(&mut obs[k * len..(k + 1) * len]);
            t.next_obs.write_to(&mut next[k * len..(k + 1) * len]);
            actions.push(t.action);
            rewards.push(t.reward);
            dones.push(t.done);
        }
        let targets = td_targets(&self.online, &self.target, &next, &rewards, &dones, cfg.gamma, cfg.double_q);
        let out = q_loss_grad(&self.online, &obs, &actions, &targets, &sample.is_weights, cfg.huber_delta);
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.f64().is_finite()) {
            return Err(Error::NonFinite(format!(
                "q loss {} at update {}; batch slots {:?}, actions {:?}, rewards {:?}, targets {:?}",
                out.loss, self.updates, sample.indices, actions, rewards, targets
            )));
        }
        sgd_momentum(self.online.params_mut(), &mut self.velocity, &out.grads, cfg.lr, cfg.momentum);
        self.replay.update(&sample.indices, &out.td, cfg.per_eps)?;
        self.updates += 1;
        if self.updates % cfg.target_update == 0 {
            self.sync_target();
        }
        Ok(StepMetrics {
            loss: out.loss,
            mean_q: out.q_taken.iter().sum::<f64>() / n as f64,
            mean_td: out.td.iter().map(|t| t.abs()).sum::<f64>() / n as f64,
        })
    }
}

pub const Q_FILE_VERSION: u32 = 1;
const Q_MAGIC: &[u8; 4] = b"EQNT";

/// Online and target weights plus what is needed to trust them.
#[derive(Debug, Clone, PartialEq)]
pub struct QCheckpoint {
    pub shape: QNetShape,
    pub action_checksum: String,
    pub step: u64,
    pub online: Vec<f32>,
    pub target: Vec<f32>,
}

impl QCheckpoint {
    pub fn from_learner(l: &Learner<ConvQNet<f32>>, action_checksum: &str, step: u64) -> Self {
        Self {
            shape: l.online.shape,
            action_checksum: action_checksum.to_string(),
            step,
            online: l.online.params.clone(),
            target: l.target.params.clone(),
        }
    }

    pub fn online_net(&self) -> ConvQNet<f32> {
        ConvQNet {
            shape: self.shape,
            params: self.online.clone(),
        }
    }

    pub fn target_net(&self) -> ConvQNet<f32> {
        ConvQNet {
            shape: self.shape,
            params: self.target.clone(),
        }
    }

    pub fn verify_actions(&self, checksum: &str) -> Result<()> {
        if self.action_checksum != checksum {
            return Err(Error::Checksum {
                expected: self.action_checksum.clone(),
                found: checksum.to_string(),
            });
        }
        Ok(())
    }

    /// Magic, version, 7 shape dims, step (u64), checksum (length-prefixed),
    /// parameter count, then online and target weights as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Q_MAGIC.to_vec();
        out.extend_from_slice(&Q_FILE_VERSION.to_le_bytes());
        for d in [s.in_c, s.height, s.width, s.c1, s.c2, s.hidden, s.n_actions] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.action_checksum.len() as u32).to_le_bytes());
        out.extend_from_slice(self.action_checksum.as_bytes());
        out.extend_from_slice(&(self.online.len() as u32).to_le_bytes());
        for v in self.online.iter().chain(&self.target) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != Q_MAGIC {
            return Err(Error::parse("q checkpoint", "bad magic"));
        }
        let version = rd.u32()?;
        if version != Q_FILE_VERSION {
            return Err(Error::Version {
                what: "q checkpoint",
                found: version,
                expected: Q_FILE_VERSION,
            });
        }
        let mut d = [0usize; 7];
        for v in d.iter_mut() {
            *v = rd.u32()? as usize;
        }
        let shape = QNetShape {
            in_c: d[0],
            height: d[1],
            width: d[2],
            c1: d[3],
            c2: d[4],
            hidden: d[5],
            n_actions: d[6],
        };
        shape.validate()?;
        let step = rd.u64()?;
        let n = rd.u32()? as usize;
        let action_checksum = String::from_utf8(rd.take(n)?.to_vec()).map_err(|e| Error::parse("q checkpoint", e))?;
        let n = rd.u32()? as usize;
        if n != shape.n_params() {
            return Err(Error::Shape(format!("{n} parameters, shape needs {}", shape.n_params())));
        }
        let mut read = || -> Result<Vec<f32>> { (0..n).map(|_| rd.f32()).collect() };
        let online = read()?;
        let target = read()?;
        if rd.pos != bytes.len() {
            return Err(Error::parse("q checkpoint", "trailing bytes"));
        }
        if online.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q checkpoint weights".into()));
        }
        Ok(Self {
            shape,
            action_checksum,
            step,
            online,
            target,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
