//! Flat `key = value` run configuration.
//!
//! Keys mirror the fields of [`TrainConfig`], [`ModelConfig`] and the
//! scoring options. Lines starting with `#` are comments. Any key can be
//! overridden from the environment as `FLIPLEARN_<KEY>` (upper case), e.g.
//! `FLIPLEARN_LAMBDA=0`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::ScoringOptions;
use crate::objectives::TrainConfig;
use crate::seq_model::ModelConfig;

pub const ENV_PREFIX: &str = "FLIPLEARN_";

pub const KEYS: &[&str] = &[
    "mode",
    "lambda",
    "ul_enabled",
    "steps",
    "batch_size",
    "seed",
    "negative_sampling",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "grad_clip",
    "d_model",
    "n_heads",
    "d_ff",
    "encoder_layers",
    "decoder_layers",
    "max_source_len",
    "max_target_len",
    "tie_embeddings",
    "length_normalize",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub length_normalize: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn scoring(&self) -> ScoringOptions {
        ScoringOptions {
            length_normalize: self.length_normalize,
            log_priors: None,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "mode" => t.mode = value.parse()?,
            "lambda" => t.lambda = parse(key, value)?,
            "ul_enabled" => t.ul_enabled = parse_bool(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "negative_sampling" => t.negative_sampling = value.parse()?,
            "learning_rate" => t.optimizer.learning_rate = parse(key, value)?,
            "beta1" => t.optimizer.beta1 = parse(key, value)?,
            "beta2" => t.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => t.optimizer.eps = parse(key, value)?,
            "grad_clip" => {
                t.optimizer.grad_clip = match value.to_ascii_lowercase().as_str() {
                    "none" | "off" | "" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "d_model" => m.d_model = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "max_source_len" => m.max_source_len = parse(key, value)?,
            "max_target_len" => m.max_target_len = parse(key, value)?,
            "tie_embeddings" => m.tie_embeddings = parse_bool(key, value)?,
            "length_normalize" => self.length_normalize = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &self.model;
        Some(match key {
            "mode" => t.mode.to_string(),
            "lambda" => t.lambda.to_string(),
            "ul_enabled" => t.ul_enabled.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "negative_sampling" => t.negative_sampling.as_str().to_string(),
            "learning_rate" => t.optimizer.learning_rate.to_string(),
            "beta1" => t.optimizer.beta1.to_string(),
            "beta2" => t.optimizer.beta2.to_string(),
            "adam_eps" => t.optimizer.eps.to_string(),
            "grad_clip" => t
                .optimizer
                .grad_clip
                .map_or("none".to_string(), |c| c.to_string()),
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "encoder_layers" => m.encoder_layers.to_string(),
            "decoder_layers" => m.decoder_layers.to_string(),
            "max_source_len" => m.max_source_len.to_string(),
            "max_target_len" => m.max_target_len.to_string(),
            "tie_embeddings" => m.tie_embeddings.to_string(),
            "length_normalize" => self.length_normalize.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<config>".into(),
                line: n + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: "<config>".into(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Applies `FLIPLEARN_<KEY>` overrides from `vars`. Unrelated variables
    /// are ignored; a prefixed variable naming no key is an error.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut pending: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|key| (key.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        pending.sort();
        for (key, value) in pending {
            self.set(&key, &value).map_err(|e| match e {
                Error::Config(msg) => {
                    Error::Config(format!("{ENV_PREFIX}{}: {msg}", key.to_ascii_uppercase()))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<()> {
        self.apply_env(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let lr = self.train.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {lr}"
            )));
        }
        if !(self.train.lambda >= 0.0 && self.train.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.train.lambda
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text, every key in fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// First 8 bytes of the SHA-256 of [`RunConfig::to_text`], hex-encoded.
    pub fn hash(&self) -> String {
        stamp(&[&self.to_text()])
    }
}

/// Short stable digest of `parts`, used to name run directories.
pub fn stamp(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}
