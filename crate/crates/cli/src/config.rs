//! Run configuration: defaults, flag overrides, config-file overrides, hashing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use egonav::actions::KMeansConfig;
use egonav::dataset::SynthConfig;
use egonav::env::EnvConfig;
use egonav::prior::VaeTrainConfig;
use egonav::qlearn::TrainConfig;
use egonav::scene::SceneParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Generated,
    Corridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub params: SceneParams,
    pub corridor_length: f64,
    pub corridor_width: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Generated,
            params: SceneParams::default(),
            corridor_length: 10.0,
            corridor_width: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub sequences: usize,
    pub params: SynthConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sequences: 300,
            params: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Kinematic,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub kind: PriorKind,
    /// Latent sampling scale for the learned prior; 0 decodes the latent mean.
    pub temperature: f64,
    pub train: VaeTrainConfig,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            kind: PriorKind::Kinematic,
            temperature: 0.0,
            train: VaeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionSpec {
    pub kmeans: KMeansConfig,
    pub t_frames: usize,
}

impl Default for ActionSpec {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            t_frames: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub episodes: usize,
    /// Roll out a uniformly random policy instead of a checkpoint.
    pub random: bool,
    /// Keep per-frame poses in recorded traces.
    pub keep_poses: bool,
    pub speed_floor: f64,
    pub angle_bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: 500,
            random: false,
            keep_poses: true,
            speed_floor: egonav::eval::SPEED_FLOOR,
            angle_bins: egonav::eval::ANGLE_BINS,
        }
    }
}

/// Files a run reads; part of the configuration so outputs can be traced back.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub scene: Option<PathBuf>,
    pub scenes: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub actions: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub resume: Option<PathBuf>,
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub synth: SynthSpec,
    pub prior: PriorSpec,
    pub actions: ActionSpec,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub inputs: Inputs,
}

/// A flag value to place at a `/`-separated path of the configuration.
pub struct Override {
    pub path: &'static str,
    pub value: Value,
}

impl Override {
    pub fn new(path: &'static str, value: impl Serialize) -> Self {
        Self {
            path,
            value: serde_json::to_value(value).expect("flag values serialize"),
        }
    }
}

fn merge(base: &mut Value, file: Value, at: &str) -> Result<()> {
    match (base, file) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                let here = format!("{at}/{k}");
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key {here}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults, then flags, then the config file (the file wins).
    pub fn resolve(flags: Vec<Override>, file: Option<&Path>) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        for o in flags {
            let slot = v
                .pointer_mut(&format!("/{}", o.path))
                .with_context(|| format!("flag targets unknown config key {}", o.path))?;
            *slot = o.value;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let f: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !f.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            merge(&mut v, f, "").with_context(|| format!("in config {}", path.display()))?;
        }
        let cfg: RunConfig = serde_json::from_value(v).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be positive");
        }
        if !(self.prior.temperature >= 0.0) {
            bail!("prior.temperature must be non-negative");
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    /// Writes `resolved_config.json` and `resolved_config.sha256` into `dir`.
    pub fn write_beside(&self, dir: &Path) -> Result<String> {
        let hash = self.hash();
        let pretty = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join("resolved_config.json"), pretty).context("writing resolved config")?;
        std::fs::write(dir.join("resolved_config.sha256"), format!("{hash}\n")).context("writing config hash")?;
        Ok(hash)
    }
}
