//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::schedule::{ScheduleParams, ALPHA_BAR_FLOOR, BETA_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    None,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    pub d_emb: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub lr_decay: LrDecay,
    pub clip_norm: f64,
    pub steps: u64,
    pub seed: u64,
    pub freeze_source_embedding: bool,
    pub importance_sampling: bool,
    pub learn_padding: bool,
    pub workers: usize,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            diffusion_steps: 2000,
            schedule_offset: 1e-4,
            d_emb: 128,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 128,
            dropout: 0.1,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.01,
            lr_decay: LrDecay::None,
            clip_norm: 1.0,
            steps: 10_000,
            seed: 0,
            freeze_source_embedding: false,
            importance_sampling: true,
            learn_padding: true,
            workers: 1,
            log_every: 10,
            eval_every: 500,
            checkpoint_every: 1000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "T" => self.diffusion_steps = parse(key, value)?,
            "s" => self.schedule_offset = parse(key, value)?,
            "d_emb" => self.d_emb = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "lr_decay" => {
                self.lr_decay = match value {
                    "none" => LrDecay::None,
                    "linear" => LrDecay::Linear,
                    _ => return Err(Error::Config(format!("invalid lr_decay {value:?}"))),
                }
            }
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "freeze_source_embedding" => self.freeze_source_embedding = parse_bool(key, value)?,
            "importance_sampling" => self.importance_sampling = parse_bool(key, value)?,
            "learn_padding" => self.learn_padding = parse_bool(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let lines: [(&str, String); 23] = [
            ("T", self.diffusion_steps.to_string()),
            ("s", self.schedule_offset.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            (
                "lr_decay",
                match self.lr_decay {
                    LrDecay::None => "none".into(),
                    LrDecay::Linear => "linear".into(),
                },
            ),
            ("clip_norm", self.clip_norm.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_source_embedding", self.freeze_source_embedding.to_string()),
            ("importance_sampling", self.importance_sampling.to_string()),
            ("learn_padding", self.learn_padding.to_string()),
            ("workers", self.workers.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_params().build()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must leave room for the [BOS] x [SEP] y [EOS] layout".into()));
        }
        self.model_config(1).validate()
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.diffusion_steps,
            offset: self.schedule_offset,
            floor: ALPHA_BAR_FLOOR,
            beta_cap: BETA_CAP,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_emb: self.d_emb,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            freeze_source_embedding: self.freeze_source_embedding,
        }
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = ((self.steps as f64 * self.warmup_frac).round() as u64).max(1);
        let base = if step < warmup {
            self.lr * (step + 1) as f64 / warmup as f64
        } else {
            self.lr
        };
        match self.lr_decay {
            LrDecay::None => base,
            LrDecay::Linear if step >= warmup && self.steps > warmup => {
                let frac = (step - warmup) as f64 / (self.steps - warmup) as f64;
                base * (1.0 - frac).max(0.0)
            }
            LrDecay::Linear => base,
        }
    }
}
