//! Teacher-forced prediction metrics and the regression-based emotion error.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::GenerateError;
use crate::model::{HeadKind, Model, ModelError};
use crate::tensor::Scalar;
use crate::tokenizer::{strip_non_music, ConditionPair, TokenId};
use crate::training::{chunk_scores, sequential_chunks, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub nll: f64,
    pub top1: f64,
    pub top5: f64,
    pub n_chunks: usize,
    pub n_tokens: usize,
}

/// Cuts each song into sequential non-overlapping chunks and scores every
/// counted position.
pub fn eval_prediction<T: Scalar>(
    model: &Model<T>,
    songs: &[(Vec<TokenId>, Option<ConditionPair>)],
    chunk_len: usize,
) -> Result<PredictionMetrics, EvalError> {
    let variant = model.config.variant;
    let (mut nll, mut top1, mut top5, mut n, mut chunks) = (0.0, 0, 0, 0, 0);
    for (song, cond) in songs {
        for chunk in sequential_chunks(song, chunk_len, variant, *cond)? {
            let (a, b, c, d) = chunk_scores(model, &chunk)?;
            nll += a;
            top1 += b;
            top5 += c;
            n += d;
            chunks += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let n_f = n as f64;
    Ok(PredictionMetrics { nll: nll / n_f, top1: top1 as f64 / n_f, top5: top5 as f64 / n_f, n_chunks: chunks, n_tokens: n })
}

/// Window starts covering `n` tokens with the given stride, plus one window
/// aligned to the end when the strided ones stop short.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n <= window {
        return alloc::vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + window <= n).collect();
    let last = *starts.last().expect("n > window implies a first window");
    if last + window < n {
        starts.push(n - window);
    }
    starts
}

/// Anything that maps one window of music tokens to (valence, arousal).
pub trait EmotionRegressor {
    fn window(&self) -> usize;
    fn predict_window(&self, tokens: &[TokenId]) -> Result<(f64, f64), ModelError>;
}

impl<T: Scalar> EmotionRegressor for Model<T> {
    fn window(&self) -> usize {
        self.config.max_len
    }

    fn predict_window(&self, tokens: &[TokenId]) -> Result<(f64, f64), ModelError> {
        if self.config.head != HeadKind::Regression {
            return Err(ModelError::InvalidConfig("not a regression model".into()));
        }
        self.predict_pair(tokens, &alloc::vec![true; tokens.len()])
    }
}

/// Averages window predictions over 50%-overlapping windows, clamped to
/// `[-1, 1]`.
pub fn predict_emotion<R: EmotionRegressor + ?Sized>(reg: &R, tokens: &[TokenId]) -> Result<ConditionPair, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Empty);
    }
    let w = reg.window();
    let (mut v, mut a) = (0.0, 0.0);
    for (k, s) in window_starts(tokens.len(), w, w / 2).into_iter().enumerate() {
        let (pv, pa) = reg.predict_window(&tokens[s..(s + w).min(tokens.len())])?;
        // Running mean: identical window outputs average to themselves exactly.
        v += (pv - v) / (k + 1) as f64;
        a += (pa - a) / (k + 1) as f64;
    }
    Ok(ConditionPair { valence: v.clamp(-1.0, 1.0), arousal: a.clamp(-1.0, 1.0) })
}

/// Mean absolute error over the two dimensions.
pub fn emotion_error(pred: ConditionPair, target: ConditionPair) -> f64 {
    ((pred.valence - target.valence).abs() + (pred.arousal - target.arousal).abs()) / 2.0
}

/// The five bin midpoints used for both axes of the grid.
pub const GRID_VALUES: [f64; 5] = [-0.8, -0.4, 0.0, 0.4, 0.8];

/// Anything that produces a token sample for a condition.
pub trait ConditionalGenerator {
    fn generate(&self, condition: ConditionPair, seed: u64) -> Result<Vec<TokenId>, GenerateError>;
}

/// A model plus sampler settings.
pub struct ModelGenerator<'a, M: ?Sized> {
    pub model: &'a M,
    pub sampler: crate::generate::SamplerConfig,
}

impl<M: crate::generate::NextToken + ?Sized> ConditionalGenerator for ModelGenerator<'_, M> {
    fn generate(&self, condition: ConditionPair, seed: u64) -> Result<Vec<TokenId>, GenerateError> {
        let cfg = crate::generate::SamplerConfig { seed, ..self.sampler.clone() };
        let schedule = crate::generate::ConditionSchedule::constant(condition);
        crate::generate::generate(self.model, Some(&schedule), &[], &cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub values: Vec<f64>,
    pub samples_per_pair: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { values: GRID_VALUES.to_vec(), samples_per_pair: 8, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub valence: f64,
    pub arousal: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub per_pair: Vec<PairError>,
    pub mean_error: f64,
}

/// Model name to its grid report.
pub type EmotionReport = BTreeMap<String, ModelReport>;

/// Seed of sample `k` for grid pair `pair`.
pub fn sample_seed(base: u64, pair: usize, k: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((pair * 1000 + k) as u64)
}

/// One model's grid: every (valence, arousal) pair, several samples each,
/// stripped of non-music tokens before scoring.
pub fn model_grid_error<G, R>(generator: &G, regressor: &R, cfg: &GridConfig) -> Result<ModelReport, EvalError>
where
    G: ConditionalGenerator + Sync + ?Sized,
    R: EmotionRegressor + Sync + ?Sized,
{
    let pairs: Vec<ConditionPair> =
        cfg.values.iter().flat_map(|&v| cfg.values.iter().map(move |&a| ConditionPair { valence: v, arousal: a })).collect();
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..cfg.samples_per_pair).map(move |k| (p, k))).collect();
    let run = |&(p, k): &(usize, usize)| -> Result<f64, EvalError> {
        let tokens = generator.generate(pairs[p], sample_seed(cfg.seed, p, k))?;
        let music = strip_non_music(&tokens);
        if music.is_empty() {
            // Nothing to score: treat the sample as neutral.
            return Ok(emotion_error(ConditionPair { valence: 0.0, arousal: 0.0 }, pairs[p]));
        }
        Ok(emotion_error(predict_emotion(regressor, &music)?, pairs[p]))
    };
    #[cfg(feature = "parallel")]
    let errors: Vec<f64> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let errors: Vec<f64> = jobs.iter().map(run).collect::<Result<_, _>>()?;
    let per_pair: Vec<PairError> = pairs
        .iter()
        .enumerate()
        .map(|(p, c)| {
            let e = &errors[p * cfg.samples_per_pair..(p + 1) * cfg.samples_per_pair];
            PairError { valence: c.valence, arousal: c.arousal, error: crate::stats::mean(e) }
        })
        .collect();
    let mean_error = crate::stats::mean(&errors);
    Ok(ModelReport { per_pair, mean_error })
}

/// Grid reports for several named generators sharing one regressor.
pub fn inference_error_grid<R: EmotionRegressor + Sync + ?Sized>(
    generators: &[(String, &(dyn ConditionalGenerator + Sync))],
    regressor: &R,
    cfg: &GridConfig,
) -> Result<EmotionReport, EvalError> {
    let mut report = EmotionReport::new();
    for (name, g) in generators {
        report.insert(name.clone(), model_grid_error(*g, regressor, cfg)?);
    }
    Ok(report)
}
