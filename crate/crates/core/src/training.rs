//! Chunk sampling, augmentation, the plateau schedule and single optimizer
//! steps for the generators and the regressor.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::midi::{Instrument, MAX_PITCH, MIN_PITCH, N_PITCHES};
use crate::model::{Model, ModelError, Variant};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, OptimError};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{
    condition_tokens, is_condition, ConditionPair, TokenId, TokenizeError, NOTE_OFF_OFFSET, NOTE_ON_OFFSET, PAD, START, TIME_SHIFT_OFFSET,
};

/// Context length used by the full-size models.
pub const CHUNK_LEN: usize = 1216;
/// Targets with this value do not contribute to the loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Invalid(&'static str),
}

/// One teacher-forced training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainChunk {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub condition: Option<ConditionPair>,
    pub bar_aligned: bool,
}

impl TrainChunk {
    /// Builds input/target from `len + 1` consecutive tokens, right-padding
    /// with `<PAD>`.
    pub fn from_window(window: &[TokenId], len: usize, condition: Option<ConditionPair>, bar_aligned: bool) -> Self {
        let mut seq: Vec<TokenId> = window.iter().copied().take(len + 1).collect();
        seq.resize(len + 1, PAD);
        Self { input: seq[..len].to_vec(), target: seq[1..].to_vec(), condition, bar_aligned }
    }

    /// Loss targets with `<PAD>` and condition tokens replaced by [`IGNORE`].
    pub fn loss_targets(&self) -> Vec<usize> {
        loss_targets(&self.target)
    }

    /// Input with trailing padding removed (at least one token kept).
    pub fn trimmed_input(&self) -> &[TokenId] {
        let n = self.input.iter().rposition(|&t| t != PAD).map_or(1, |i| i + 1);
        &self.input[..n]
    }
}

pub fn loss_targets(target: &[TokenId]) -> Vec<usize> {
    target.iter().map(|&t| if t == PAD || is_condition(t) { IGNORE } else { t as usize }).collect()
}

/// Index of the first token at or after each bar time.
pub fn bar_token_starts(token_times: &[u32], bars_ms: &[u32]) -> Vec<usize> {
    let mut starts: Vec<usize> =
        bars_ms.iter().map(|&b| token_times.partition_point(|&t| t < b)).filter(|&i| i < token_times.len()).collect();
    starts.dedup();
    starts
}

/// Which kind of chunk [`sample_chunk`] draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkMode {
    /// Fair coin between the two below.
    Random,
    BarAligned,
    RandomOffset,
}

/// Draws one training chunk of `len` input tokens. Bar-aligned chunks start
/// at a random bar with `<START>` (after the two condition tokens for the
/// discrete-token variant); other chunks start anywhere without `<START>`.
pub fn sample_chunk(
    song: &[TokenId],
    bar_starts: &[usize],
    len: usize,
    variant: Variant,
    condition: Option<ConditionPair>,
    mode: ChunkMode,
    rng: &mut crate::Rng,
) -> Result<TrainChunk, TrainError> {
    if song.is_empty() {
        return Err(TrainError::Invalid("empty song"));
    }
    if variant.is_conditional() && condition.is_none() {
        return Err(TrainError::Invalid("conditional variant needs a labeled song"));
    }
    let bar_aligned = match mode {
        ChunkMode::Random => rng.random_bool(0.5),
        ChunkMode::BarAligned => true,
        ChunkMode::RandomOffset => false,
    };
    let mut window = Vec::with_capacity(len + 1);
    if bar_aligned {
        if variant == Variant::DiscreteToken {
            window.extend(condition_tokens(condition.expect("checked above"))?);
        }
        window.push(START);
        let start = if bar_starts.is_empty() { 0 } else { bar_starts[rng.random_range(0..bar_starts.len())] };
        let room = (len + 1).saturating_sub(window.len());
        window.extend(song[start.min(song.len())..].iter().take(room));
    } else {
        let last = song.len().saturating_sub(len + 1);
        let start = rng.random_range(0..=last);
        window.extend(song[start..].iter().take(len + 1));
    }
    let condition = if variant.is_conditional() { condition } else { None };
    Ok(TrainChunk::from_window(&window, len, condition, bar_aligned))
}

/// Moves every pitched note token by `shift` semitones. Drums are left
/// alone; tokens whose pitch would leave the keyboard are dropped, which
/// removes on and off of the same note together.
pub fn transpose_tokens(tokens: &[TokenId], shift: i32) -> Vec<TokenId> {
    let block = N_PITCHES as TokenId;
    tokens
        .iter()
        .filter_map(|&t| {
            if t >= TIME_SHIFT_OFFSET {
                return Some(t);
            }
            let base = if t >= NOTE_OFF_OFFSET { NOTE_OFF_OFFSET } else { NOTE_ON_OFFSET };
            let inst = (t - base) / block;
            if inst == Instrument::Drums.index() as TokenId {
                return Some(t);
            }
            let pitch = ((t - base) % block) as i32 + i32::from(MIN_PITCH) + shift;
            if !(i32::from(MIN_PITCH)..=i32::from(MAX_PITCH)).contains(&pitch) {
                return None;
            }
            Some(base + inst * block + (pitch - i32::from(MIN_PITCH)) as TokenId)
        })
        .collect()
}

/// Transposes by a shift drawn uniformly from -3..=3.
pub fn transpose_augment(tokens: &[TokenId], rng: &mut crate::Rng) -> (Vec<TokenId>, i32) {
    let shift = rng.random_range(-3..=3);
    (transpose_tokens(tokens, shift), shift)
}

/// Learning rate that drops once when training stalls: after each window of
/// `window` steps the mean loss is recorded, and once three windows exist,
/// a relative improvement below `min_rel_improvement` from the oldest to
/// the newest of the last three switches to `lr_low`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr_high: f64,
    pub lr_low: f64,
    pub window: usize,
    pub min_rel_improvement: f64,
    window_means: Vec<f64>,
    sum: f64,
    count: usize,
    dropped_at: Option<u64>,
    steps: u64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(2e-5, 2e-6, 1000)
    }
}

impl PlateauSchedule {
    pub fn new(lr_high: f64, lr_low: f64, window: usize) -> Self {
        Self {
            lr_high,
            lr_low,
            window,
            min_rel_improvement: 1e-3,
            window_means: Vec::new(),
            sum: 0.0,
            count: 0,
            dropped_at: None,
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        if self.dropped_at.is_some() {
            self.lr_low
        } else {
            self.lr_high
        }
    }

    /// Step at which the drop happened.
    pub fn dropped_at(&self) -> Option<u64> {
        self.dropped_at
    }

    pub fn window_means(&self) -> &[f64] {
        &self.window_means
    }

    /// Records one step's loss and returns the rate for the next step.
    pub fn record(&mut self, loss: f64) -> f64 {
        self.steps += 1;
        self.sum += loss;
        self.count += 1;
        if self.count == self.window {
            self.window_means.push(self.sum / self.count as f64);
            self.sum = 0.0;
            self.count = 0;
            let n = self.window_means.len();
            if self.dropped_at.is_none() && n >= 3 {
                let (old, new) = (self.window_means[n - 3], self.window_means[n - 1]);
                if (old - new) / old.abs().max(f64::MIN_POSITIVE) < self.min_rel_improvement {
                    self.dropped_at = Some(self.steps);
                }
            }
        }
        self.lr()
    }
}

/// Hyper-parameters of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lr_high: f64,
    pub lr_low: f64,
    pub plateau_window: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { lr_high: 2e-5, lr_low: 2e-6, plateau_window: 1000, batch_size: 4, clip_norm: 1.0, chunk_len: CHUNK_LEN, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Number of non-ignored target positions.
    pub tokens: usize,
}

/// Mean cross-entropy over every non-ignored target of the batch.
pub fn lm_batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &crate::model::Bound<'_>,
    batch: &[TrainChunk],
) -> Result<(Var, usize), TrainError> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for chunk in batch {
        if chunk.input.len() != chunk.target.len() {
            return Err(TrainError::Invalid("input and target lengths differ"));
        }
        let logits = model.forward(tape, bound, &chunk.input, chunk.condition)?;
        rows.push(logits);
        targets.extend(chunk.loss_targets());
    }
    let logits = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0).map_err(ModelError::from)? };
    let count = targets.iter().filter(|&&t| t != IGNORE).count();
    let loss = tape.cross_entropy(logits, &targets, IGNORE).map_err(ModelError::from)?;
    Ok((loss, count))
}

/// A model with its optimizer and schedule.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub schedule: PlateauSchedule,
    pub spec: TrainSpec,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, spec: TrainSpec) -> Self {
        let schedule = PlateauSchedule::new(spec.lr_high, spec.lr_low, spec.plateau_window);
        Self { model, adam: Adam::new(AdamConfig::default()), schedule, spec, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn dropout_seed(&self) -> u64 {
        self.spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.step)
    }

    /// One language-model step on `batch`. The model is left untouched if
    /// the loss or any gradient is non-finite.
    pub fn lm_step(&mut self, batch: &[TrainChunk]) -> Result<StepStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut tape = Tape::training(self.dropout_seed());
        let bound = self.model.params.bind(&mut tape, true);
        let (loss, tokens) = lm_batch_loss(&self.model, &mut tape, &bound, batch)?;
        let (loss_value, grads) = gradients(&tape, &bound, loss, self.step)?;
        self.update(loss_value, grads, tokens)
    }

    /// One regression step: mean squared error against each window's pair.
    pub fn regression_step(&mut self, batch: &[(Vec<TokenId>, ConditionPair)]) -> Result<StepStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut tape = Tape::training(self.dropout_seed());
        let bound = self.model.params.bind(&mut tape, true);
        let mut outs = Vec::with_capacity(batch.len());
        let mut target = Vec::with_capacity(2 * batch.len());
        for (tokens, pair) in batch {
            let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
            outs.push(self.model.regress(&mut tape, &bound, tokens, &keep)?);
            target.extend([T::from_f64(pair.valence), T::from_f64(pair.arousal)]);
        }
        let pred = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0).map_err(ModelError::from)? };
        let loss = tape.mse(pred, &target).map_err(ModelError::from)?;
        let (loss_value, grads) = gradients(&tape, &bound, loss, self.step)?;
        self.update(loss_value, grads, batch.len())
    }

    fn update(&mut self, loss_value: f64, mut grads: Vec<Tensor<T>>, tokens: usize) -> Result<StepStats, TrainError> {
        let grad_norm = clip_grad_norm(&mut grads, self.spec.clip_norm);
        let lr = self.schedule.lr();
        self.adam.step(self.model.params.tensors_mut(), &grads, lr)?;
        self.schedule.record(loss_value);
        self.step += 1;
        Ok(StepStats { step: self.step, loss: loss_value, lr, grad_norm, tokens })
    }
}

fn gradients<T: Scalar>(
    tape: &Tape<T>,
    bound: &crate::model::Bound<'_>,
    loss: Var,
    step: u64,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let loss_value = Scalar::to_f64(tape.value(loss).item());
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    Ok((loss_value, bound.grads(tape, &mut grads)))
}

/// Teacher-forced loss, top-1 and top-5 hits for one chunk, in evaluation
/// mode. Returns `(nll_sum, top1_hits, top5_hits, counted)`.
pub fn chunk_scores<T: Scalar>(model: &Model<T>, chunk: &TrainChunk) -> Result<(f64, usize, usize, usize), ModelError> {
    let logits = model.logits(&chunk.input, chunk.condition)?;
    Ok(score_logits(&logits, &chunk.loss_targets()))
}

/// Scores `[rows, vocab]` logits against targets. A target counts as a
/// top-n hit only if it ranks within the first n after sorting by logit
/// descending and id ascending.
pub fn score_logits<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (f64, usize, usize, usize) {
    let (mut nll, mut top1, mut top5, mut n) = (0.0, 0, 0, 0);
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let row = logits.row(r);
        let row64: Vec<f64> = row.iter().map(|&x| Scalar::to_f64(x)).collect();
        nll += crate::autograd::log_sum_exp(&row64) - row64[t];
        let target = row64[t];
        let rank = row64.iter().enumerate().filter(|&(i, &v)| v > target || (v == target && i < t)).count();
        top1 += usize::from(rank < 1);
        top5 += usize::from(rank < 5);
        n += 1;
    }
    (nll, top1, top5, n)
}

/// Fixed-length, non-overlapping chunks covering `song`, starting with
/// `<START>` (after the condition tokens for the discrete-token variant).
pub fn sequential_chunks(
    song: &[TokenId],
    len: usize,
    variant: Variant,
    condition: Option<ConditionPair>,
) -> Result<Vec<TrainChunk>, TrainError> {
    let mut seq = Vec::with_capacity(song.len() + 3);
    if variant == Variant::DiscreteToken {
        let c = condition.ok_or(TrainError::Invalid("discrete-token needs a condition"))?;
        seq.extend(condition_tokens(c)?);
    }
    seq.push(START);
    seq.extend_from_slice(song);
    let cond = if variant.is_conditional() { condition } else { None };
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < seq.len() {
        let end = (start + len + 1).min(seq.len());
        out.push(TrainChunk::from_window(&seq[start..end], len, cond, start == 0));
        start += len;
    }
    Ok(out)
}

/// Losses of a run, in step order.
pub fn loss_curve(stats: &[StepStats]) -> Vec<f64> {
    stats.iter().map(|s| s.loss).collect()
}
