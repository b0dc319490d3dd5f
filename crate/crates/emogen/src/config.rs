//! Run configuration: `key = value` text with `#` comments.
//!
//! Values are read as JSON scalars when they parse as such and as strings
//! otherwise, then checked against [`RunConfig`]. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogen_core::evaluate::GRID_VALUES;
use emogen_core::generate::SamplerConfig;
use emogen_core::model::{EmbeddingTransfer, HeadKind, ModelConfig, Variant};
use emogen_core::training::TrainSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,

    /// Use the full-size architecture instead of the fields below.
    pub full_scale: bool,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Condition width of the concatenated variant; a quarter of `d_model`
    /// when zero.
    pub d_cond: usize,
    pub dropout: f64,
    pub embedding_transfer: EmbeddingTransfer,
    pub regressor_layers: usize,

    pub midi_root: PathBuf,
    pub match_table: PathBuf,
    pub fixtures: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
    pub manifest: PathBuf,

    pub steps: u64,
    pub lr_high: f64,
    pub lr_low: f64,
    pub plateau_window: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Training chunk length; `max_len` when zero.
    pub chunk_len: usize,
    pub augment: bool,
    pub checkpoint_every: u64,

    pub p: f64,
    pub temperature: f64,
    pub min_nucleus: usize,
    pub temp_boost: f64,
    pub max_tokens: usize,
    /// Generation context; `max_len` when zero.
    pub window: usize,

    pub samples_per_pair: usize,
    pub gradcheck_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainSpec::default();
        let sampler = SamplerConfig::default();
        Self {
            seed: 0,
            variant: Variant::Vanilla,
            full_scale: false,
            n_layers: 4,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            max_len: 512,
            d_cond: 0,
            dropout: 0.1,
            embedding_transfer: EmbeddingTransfer::Truncate,
            regressor_layers: 8,
            midi_root: "midi".into(),
            match_table: "matches.json".into(),
            fixtures: None,
            feature_cache: None,
            manifest: "manifest.json".into(),
            steps: 10_000,
            lr_high: train.lr_high,
            lr_low: train.lr_low,
            plateau_window: train.plateau_window,
            batch_size: train.batch_size,
            clip_norm: train.clip_norm,
            chunk_len: 0,
            augment: true,
            checkpoint_every: 1000,
            p: sampler.p,
            temperature: sampler.temperature,
            min_nucleus: sampler.min_nucleus,
            temp_boost: sampler.temp_boost,
            max_tokens: sampler.max_tokens,
            window: 0,
            samples_per_pair: 8,
            gradcheck_seeds: 5,
        }
    }
}

fn parse_value(raw: &str) -> serde_json::Value {
    let raw = raw.trim();
    let unquoted = raw.strip_prefix('"').and_then(|s| s.strip_suffix('"'));
    if let Some(s) = unquoted {
        return serde_json::Value::String(s.into());
    }
    match serde_json::from_str::<serde_json::Value>(raw) {
        Ok(v) if !v.is_object() && !v.is_array() => v,
        _ => serde_json::Value::String(raw.into()),
    }
}

/// Parses `key = value` lines into a key map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, serde_json::Value>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if out.insert(key.clone(), parse_value(v)).is_some() {
            return Err(ConfigError::Duplicate(key));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_pairs(pairs: BTreeMap<String, serde_json::Value>) -> Result<Self, ConfigError> {
        let map: serde_json::Map<String, serde_json::Value> = pairs.into_iter().collect();
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    /// Every field as `key = value`, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in value.as_object().expect("struct") {
            let v = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => format!("\"{s}\""),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn model_config(&self, variant: Variant, head: HeadKind) -> ModelConfig {
        let mut cfg = if self.full_scale {
            ModelConfig::full_scale(variant)
        } else {
            let mut c = ModelConfig::toy(variant, self.n_layers, self.d_model, self.n_heads, self.d_ff, self.max_len);
            if variant == Variant::ContinuousConcatenated && self.d_cond > 0 {
                c.d_cond = self.d_cond;
            }
            c.dropout = self.dropout;
            c
        };
        if head == HeadKind::Regression {
            cfg.n_layers = self.regressor_layers;
            cfg.head = HeadKind::Regression;
        }
        cfg
    }

    pub fn train_spec(&self, max_len: usize) -> TrainSpec {
        TrainSpec {
            lr_high: self.lr_high,
            lr_low: self.lr_low,
            plateau_window: self.plateau_window,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            chunk_len: if self.chunk_len == 0 { max_len } else { self.chunk_len.min(max_len) },
            seed: self.seed,
        }
    }

    pub fn sampler(&self, max_len: usize) -> SamplerConfig {
        SamplerConfig {
            p: self.p,
            temperature: self.temperature,
            min_nucleus: self.min_nucleus,
            temp_boost: self.temp_boost,
            max_tokens: self.max_tokens,
            window: if self.window == 0 { max_len } else { self.window },
            seed: self.seed,
        }
    }

    pub fn grid_values(&self) -> Vec<f64> {
        GRID_VALUES.to_vec()
    }
}
