//! Run configuration: defaults, presets, `key = value` files and seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorConfig;
use crate::curiosity::CuriosityConfig;
use crate::error::{Error, Result};
use crate::world_model::WorldModelConfig;

/// Independent seeds for the environment, parameter initialization and all
/// training-time sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTriple {
    pub env: u64,
    pub init: u64,
    pub sampling: u64,
}

impl SeedTriple {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            env: split_seed(seed, 1),
            init: split_seed(seed, 2),
            sampling: split_seed(seed, 3),
        }
    }
}

/// SplitMix64 finalizer over `seed` and a stream tag.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            o => Err(Error::Config {
                key: "preset".into(),
                msg: format!("unknown preset `{o}` (expected desk or paper)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub env: String,
    pub total_steps: u64,
    /// Environment steps between training ticks.
    pub train_interval: u64,
    pub n_model: usize,
    pub n_behavior: usize,
    /// Run the behavior updates after all model updates of a tick instead
    /// of inside the model loop.
    pub flat_loops: bool,
    pub batch_size: usize,
    pub seq_len: usize,
    pub buffer_capacity: usize,
    pub model_lr: f32,
    pub grad_clip: f32,
    pub checkpoint_every: u64,
    pub seeds: SeedTriple,
    pub model: WorldModelConfig,
    pub behavior: BehaviorConfig,
    pub curiosity: CuriosityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let paper = Self {
            preset: Preset::Paper,
            env: "simple".into(),
            total_steps: 1_000_000,
            train_interval: 5,
            n_model: 100,
            n_behavior: 10,
            flat_loops: false,
            batch_size: 50,
            seq_len: 50,
            buffer_capacity: 1_000_000,
            model_lr: 3e-4,
            grad_clip: 100.0,
            checkpoint_every: 10_000,
            seeds: SeedTriple::from_seed(0),
            model: WorldModelConfig::default(),
            behavior: BehaviorConfig::default(),
            curiosity: CuriosityConfig::default(),
        };
        match p {
            Preset::Paper => paper,
            Preset::Desk => Self {
                preset: Preset::Desk,
                total_steps: 30_000,
                train_interval: 10,
                n_model: 1,
                n_behavior: 1,
                batch_size: 8,
                seq_len: 20,
                buffer_capacity: 50_000,
                model: WorldModelConfig {
                    d_z: 8,
                    d_h: 32,
                    hidden: 128,
                    recon_weight: 360.0,
                    enc_channels: [8, 16, 16],
                    ..WorldModelConfig::default()
                },
                behavior: BehaviorConfig {
                    horizon: 8,
                    hidden: 128,
                    actor_lr: 4e-4,
                    critic_lr: 4e-4,
                    min_std: 0.3,
                    ..BehaviorConfig::default()
                },
                ..paper
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                })
            }
        };
        positive("train.train_interval", self.train_interval >= 1)?;
        positive("train.n_model", self.n_model >= 1)?;
        positive("train.n_behavior", self.n_behavior >= 1)?;
        positive("train.batch_size", self.batch_size >= 1)?;
        positive("train.seq_len", self.seq_len >= 1)?;
        positive("train.buffer_capacity", self.buffer_capacity >= 1)?;
        positive("train.checkpoint_every", self.checkpoint_every >= 1)?;
        positive("train.model_lr", self.model_lr > 0.0 && self.model_lr.is_finite())?;
        positive("train.grad_clip", self.grad_clip > 0.0)?;
        if self.buffer_capacity < self.seq_len {
            return Err(Error::Config {
                key: "train.buffer_capacity".into(),
                msg: "smaller than train.seq_len".into(),
            });
        }
        if !(self.curiosity.alpha >= 0.0 && self.curiosity.alpha.is_finite()) {
            return Err(Error::Config {
                key: "curiosity.alpha".into(),
                msg: "must be a finite non-negative number".into(),
            });
        }
        self.model.validate()?;
        self.behavior.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" | "train.env" => self.env = v.to_string(),
            "train.total_steps" => self.total_steps = num(key, v)?,
            "train.train_interval" => self.train_interval = num(key, v)?,
            "train.n_model" => self.n_model = num(key, v)?,
            "train.n_behavior" => self.n_behavior = num(key, v)?,
            "train.flat_loops" => self.flat_loops = boolean(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.seq_len" => self.seq_len = num(key, v)?,
            "train.buffer_capacity" => self.buffer_capacity = num(key, v)?,
            "train.model_lr" => self.model_lr = num(key, v)?,
            "train.grad_clip" => self.grad_clip = num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "seed" => self.seeds = SeedTriple::from_seed(num(key, v)?),
            "seed.env" => self.seeds.env = num(key, v)?,
            "seed.init" => self.seeds.init = num(key, v)?,
            "seed.sampling" => self.seeds.sampling = num(key, v)?,
            "model.d_z" => self.model.d_z = num(key, v)?,
            "model.d_h" => self.model.d_h = num(key, v)?,
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.recon_weight" => self.model.recon_weight = num(key, v)?,
            "model.beta" => self.model.beta = num(key, v)?,
            "model.lambda_r" => self.model.lambda_r = num(key, v)?,
            "model.lambda_d" => self.model.lambda_d = num(key, v)?,
            "model.enc_channels" => self.model.enc_channels = triple(key, v)?,
            "model.enc_kernels" => self.model.enc_kernels = triple(key, v)?,
            "model.enc_strides" => self.model.enc_strides = triple(key, v)?,
            "model.decode_uses_h" => self.model.decode_uses_h = boolean(key, v)?,
            "model.intrinsic_head" => self.model.intrinsic_head = boolean(key, v)?,
            "model.deterministic" => self.model.deterministic = boolean(key, v)?,
            "model.no_recurrent" => self.model.no_recurrent = boolean(key, v)?,
            "behavior.horizon" => self.behavior.horizon = num(key, v)?,
            "behavior.lambda" => self.behavior.lambda = num(key, v)?,
            "behavior.gamma" => self.behavior.gamma = num(key, v)?,
            "behavior.actor_lr" => self.behavior.actor_lr = num(key, v)?,
            "behavior.critic_lr" => self.behavior.critic_lr = num(key, v)?,
            "behavior.entropy" => self.behavior.entropy = num(key, v)?,
            "behavior.hidden" => self.behavior.hidden = num(key, v)?,
            "behavior.clip_norm" => self.behavior.clip_norm = num(key, v)?,
            "behavior.actor_ratio" => self.behavior.actor_ratio = num(key, v)?,
            "behavior.min_std" => self.behavior.min_std = num(key, v)?,
            "curiosity.alpha" => self.curiosity.alpha = num(key, v)?,
            "curiosity.enabled" => self.curiosity.enabled = boolean(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies every assignment in `src`, then validates.
    pub fn apply_text(&mut self, src: &str, file: &str) -> Result<()> {
        for (key, value, line) in parse_assignments(src, file)? {
            self.set(&key, &value).map_err(|e| match e {
                Error::Config { key, msg } => Error::Parse {
                    file: file.into(),
                    line,
                    msg: format!("key `{key}`: {msg}"),
                },
                other => other,
            })?;
        }
        self.validate()
    }

    /// Preset defaults overlaid with the file at `path`.
    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        let mut cfg = Self::preset(preset);
        cfg.apply_text(&src, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Renders every key so that [`TrainConfig::apply_text`] reproduces `self`.
    pub fn to_text(&self) -> String {
        let join = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let m = &self.model;
        let b = &self.behavior;
        let lines = [
            format!("env = {}", self.env),
            format!("train.total_steps = {}", self.total_steps),
            format!("train.train_interval = {}", self.train_interval),
            format!("train.n_model = {}", self.n_model),
            format!("train.n_behavior = {}", self.n_behavior),
            format!("train.flat_loops = {}", self.flat_loops),
            format!("train.batch_size = {}", self.batch_size),
            format!("train.seq_len = {}", self.seq_len),
            format!("train.buffer_capacity = {}", self.buffer_capacity),
            format!("train.model_lr = {}", self.model_lr),
            format!("train.grad_clip = {}", self.grad_clip),
            format!("train.checkpoint_every = {}", self.checkpoint_every),
            format!("seed.env = {}", self.seeds.env),
            format!("seed.init = {}", self.seeds.init),
            format!("seed.sampling = {}", self.seeds.sampling),
            format!("model.d_z = {}", m.d_z),
            format!("model.d_h = {}", m.d_h),
            format!("model.hidden = {}", m.hidden),
            format!("model.recon_weight = {}", m.recon_weight),
            format!("model.beta = {}", m.beta),
            format!("model.lambda_r = {}", m.lambda_r),
            format!("model.lambda_d = {}", m.lambda_d),
            format!("model.enc_channels = {}", join(m.enc_channels)),
            format!("model.enc_kernels = {}", join(m.enc_kernels)),
            format!("model.enc_strides = {}", join(m.enc_strides)),
            format!("model.decode_uses_h = {}", m.decode_uses_h),
            format!("model.intrinsic_head = {}", m.intrinsic_head),
            format!("model.deterministic = {}", m.deterministic),
            format!("model.no_recurrent = {}", m.no_recurrent),
            format!("behavior.horizon = {}", b.horizon),
            format!("behavior.lambda = {}", b.lambda),
            format!("behavior.gamma = {}", b.gamma),
            format!("behavior.actor_lr = {}", b.actor_lr),
            format!("behavior.critic_lr = {}", b.critic_lr),
            format!("behavior.entropy = {}", b.entropy),
            format!("behavior.hidden = {}", b.hidden),
            format!("behavior.clip_norm = {}", b.clip_norm),
            format!("behavior.actor_ratio = {}", b.actor_ratio),
            format!("behavior.min_std = {}", b.min_std),
            format!("curiosity.alpha = {}", self.curiosity.alpha),
            format!("curiosity.enabled = {}", self.curiosity.enabled),
        ];
        let mut s = format!("# preset {}\n", self.preset.name());
        for l in lines {
            s.push_str(&l);
            s.push('\n');
        }
        s
    }
}

/// `(key, value, line)` triples. Blank lines and `#` comments are skipped.
pub fn parse_assignments(src: &str, file: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: file.into(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                file: file.into(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{v}`: {e}"),
    })
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            msg: format!("expected a boolean, got `{v}`"),
        }),
    }
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("expected three comma-separated integers, got `{v}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::preset(Preset::Desk);
        cfg.model.beta = 1.0;
        cfg.seeds = SeedTriple::from_seed(9);
        let mut back = TrainConfig::preset(Preset::Desk);
        back.apply_text(&cfg.to_text(), "t").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_streams_differ() {
        let s = SeedTriple::from_seed(1);
        assert!(s.env != s.init && s.init != s.sampling);
        assert_eq!(s, SeedTriple::from_seed(1));
    }
}
