//! Training driver: batch sampling on a worker thread, metrics log,
//! periodic checkpoints, and abort on non-finite values.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use emogen_core::midi::{self, bar_boundaries};
use emogen_core::model::Model;
use emogen_core::tokenizer::{encode_with_times, TokenizeError};
use emogen_core::training::{bar_token_starts, sample_chunk, transpose_tokens, ChunkMode, StepStats, TrainChunk, TrainError, Trainer};
use emogen_core::{seeded_rng, ConditionPair, TokenId};
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Song { path: PathBuf, reason: String },
    #[error("no training songs")]
    NoSongs,
    #[error("training aborted at step {step}: {source}; last good weights in {}", last_good.as_ref().map_or("(not saved)".into(), |p| p.display().to_string()))]
    Aborted { step: u64, source: TrainError, last_good: Option<PathBuf> },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A tokenized song with the token index of every bar start.
#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub name: String,
    pub tokens: Vec<TokenId>,
    pub bar_starts: Vec<usize>,
    pub condition: Option<ConditionPair>,
}

impl Song {
    pub fn from_midi(name: &str, bytes: &[u8], condition: Option<ConditionPair>) -> Result<Self, String> {
        let file = midi::parse_midi_file(bytes).map_err(|e| e.to_string())?;
        let (tokens, times) = encode_with_times(&file.events).map_err(|e: TokenizeError| e.to_string())?;
        if tokens.is_empty() {
            return Err("no notes".into());
        }
        let bars = bar_boundaries(&file.events, &file.tempo_map, &file.time_signatures);
        Ok(Self { name: name.into(), bar_starts: bar_token_starts(&times, &bars), tokens, condition })
    }

    pub fn load(path: &Path, condition: Option<ConditionPair>) -> Result<Self, FitError> {
        let bytes = std::fs::read(path).map_err(|source| FitError::Io { path: path.into(), source })?;
        Self::from_midi(&path.to_string_lossy(), &bytes, condition).map_err(|reason| FitError::Song { path: path.into(), reason })
    }

    /// Transposed copy with bar starts moved to the surviving tokens.
    pub fn transposed(&self, shift: i32) -> Song {
        if shift == 0 {
            return self.clone();
        }
        let mut new_index = Vec::with_capacity(self.tokens.len() + 1);
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for &t in &self.tokens {
            new_index.push(tokens.len());
            tokens.extend(transpose_tokens(&[t], shift));
        }
        new_index.push(tokens.len());
        let mut bar_starts: Vec<usize> =
            self.bar_starts.iter().map(|&b| new_index[b.min(self.tokens.len())]).filter(|&b| b < tokens.len()).collect();
        bar_starts.dedup();
        Song { name: self.name.clone(), tokens, bar_starts, condition: self.condition }
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub steps: u64,
    /// Steps between checkpoints; zero saves only at the end.
    pub checkpoint_every: u64,
    /// Random transposition in `[-3, 3]`.
    pub augment: bool,
    /// Where checkpoints go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Stop early once a step's loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { steps: 1000, checkpoint_every: 0, augment: true, out_dir: None, target_loss: None }
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    tokens_per_s: f64,
}

/// Draws one batch of chunks.
pub fn sample_batch(
    songs: &[Song],
    variant: emogen_core::model::Variant,
    len: usize,
    batch: usize,
    augment: bool,
    rng: &mut emogen_core::Rng,
) -> Result<Vec<TrainChunk>, TrainError> {
    (0..batch)
        .map(|_| {
            let song = &songs[rng.random_range(0..songs.len())];
            let shift = if augment { rng.random_range(-3..=3) } else { 0 };
            let song = song.transposed(shift);
            if song.tokens.is_empty() {
                return sample_chunk(&[emogen_core::tokenizer::START], &[], len, variant, song.condition, ChunkMode::Random, rng);
            }
            sample_chunk(&song.tokens, &song.bar_starts, len, variant, song.condition, ChunkMode::Random, rng)
        })
        .collect()
}

fn meta(trainer: &Trainer<f32>) -> serde_json::Value {
    serde_json::json!({ "step": trainer.step_count(), "lr": trainer.schedule.lr() })
}

fn save(dir: &Path, file: &str, model: &Model<f32>, meta: serde_json::Value) -> Result<PathBuf, CheckpointError> {
    let path = dir.join(file);
    checkpoint::save(&path, model, meta)?;
    Ok(path)
}

/// Runs language-model steps on chunks sampled from `songs`.
///
/// Batches are drawn on a worker thread from a generator seeded by the
/// train spec, so a run is reproducible. A metrics line is appended per
/// step. On a non-finite loss or gradient the current (last good) weights
/// are saved to `last_good.ckpt` and the error is returned.
pub fn fit(
    trainer: &mut Trainer<f32>,
    songs: &[Song],
    opts: &FitOptions,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>, FitError> {
    if songs.is_empty() {
        return Err(FitError::NoSongs);
    }
    let variant = trainer.model.config.variant;
    let (len, batch) = (trainer.spec.chunk_len, trainer.spec.batch_size);
    let seed = trainer.spec.seed ^ 0x5EED_DA7A;
    let steps = opts.steps;
    let mut stats = Vec::with_capacity(steps as usize);
    std::thread::scope(|scope| -> Result<(), FitError> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<TrainChunk>, TrainError>>(4);
        scope.spawn(move || {
            let mut rng = seeded_rng(seed);
            for _ in 0..steps {
                if tx.send(sample_batch(songs, variant, len, batch, opts.augment, &mut rng)).is_err() {
                    break;
                }
            }
        });
        for chunks in rx.iter() {
            let chunks = chunks?;
            let started = Instant::now();
            let s = match trainer.lm_step(&chunks) {
                Ok(s) => s,
                Err(e @ (TrainError::NonFiniteLoss { .. } | TrainError::Optim(_))) => {
                    let last_good = match &opts.out_dir {
                        Some(dir) => Some(save(dir, LAST_GOOD_FILE, &trainer.model, meta(trainer))?),
                        None => None,
                    };
                    return Err(FitError::Aborted { step: trainer.step_count(), source: e, last_good });
                }
                Err(e) => return Err(e.into()),
            };
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            if let Some(w) = metrics.as_deref_mut() {
                let line =
                    MetricsLine { step: s.step, loss: s.loss, lr: s.lr, grad_norm: s.grad_norm, tokens_per_s: s.tokens as f64 / secs };
                let text = serde_json::to_string(&line).expect("metrics serialize");
                writeln!(w, "{text}").map_err(|source| FitError::Io { path: METRICS_FILE.into(), source })?;
            }
            log::debug!("step {} loss {:.4} lr {:.1e}", s.step, s.loss, s.lr);
            stats.push(s);
            if let (Some(dir), true) = (&opts.out_dir, opts.checkpoint_every > 0 && s.step % opts.checkpoint_every == 0) {
                save(dir, CHECKPOINT_FILE, &trainer.model, meta(trainer))?;
            }
            if opts.target_loss.is_some_and(|t| s.loss < t) {
                break;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = &opts.out_dir {
        save(dir, CHECKPOINT_FILE, &trainer.model, meta(trainer))?;
    }
    Ok(stats)
}

/// Random windows of a labeled song for the regressor, with the song's pair.
pub fn sample_regression_batch(
    songs: &[Song],
    window: usize,
    batch: usize,
    rng: &mut emogen_core::Rng,
) -> Vec<(Vec<TokenId>, ConditionPair)> {
    (0..batch)
        .map(|_| {
            let s = &songs[rng.random_range(0..songs.len())];
            let last = s.tokens.len().saturating_sub(window);
            let start = rng.random_range(0..=last);
            let w = s.tokens[start..(start + window).min(s.tokens.len())].to_vec();
            (w, s.condition.expect("regression songs are labeled"))
        })
        .collect()
}

/// Regression training: mean squared error of window predictions.
pub fn fit_regressor(
    trainer: &mut Trainer<f32>,
    songs: &[Song],
    steps: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>, FitError> {
    if songs.is_empty() || songs.iter().any(|s| s.condition.is_none() || s.tokens.is_empty()) {
        return Err(FitError::NoSongs);
    }
    let window = trainer.model.config.max_len;
    let mut rng = seeded_rng(trainer.spec.seed ^ 0x0E6E_5500);
    let mut stats = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = sample_regression_batch(songs, window, trainer.spec.batch_size, &mut rng);
        let started = Instant::now();
        let s = trainer.regression_step(&batch)?;
        if let Some(w) = metrics.as_deref_mut() {
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            let n: usize = batch.iter().map(|(t, _)| t.len()).sum();
            let line = MetricsLine { step: s.step, loss: s.loss, lr: s.lr, grad_norm: s.grad_norm, tokens_per_s: n as f64 / secs };
            writeln!(w, "{}", serde_json::to_string(&line).expect("metrics serialize"))
                .map_err(|source| FitError::Io { path: METRICS_FILE.into(), source })?;
        }
        stats.push(s);
    }
    Ok(stats)
}

/// Mean squared error of whole-song predictions against their labels.
pub fn regression_mse(model: &Model<f32>, songs: &[Song]) -> Result<f64, emogen_core::model::ModelError> {
    let mut total = 0.0;
    for s in songs {
        let c = s.condition.expect("labeled");
        let p = emogen_core::evaluate::predict_emotion(model, &s.tokens)?;
        total += ((p.valence - c.valence).powi(2) + (p.arousal - c.arousal).powi(2)) / 2.0;
    }
    Ok(total / songs.len().max(1) as f64)
}
