//! Autoregressive sampling with nucleus filtering, adaptive temperature,
//! sliding-window continuation and condition schedules.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, Variant};
use crate::tensor::Scalar;
use crate::tokenizer::{condition_tokens, ConditionPair, TokenId, TokenizeError, START};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("{variant} model {}", if *.given { "does not take a schedule" } else { "requires a schedule" })]
    Condition { variant: Variant, given: bool },
    #[error("invalid sampler config: {0}")]
    Config(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Nucleus mass.
    pub p: f64,
    pub temperature: f64,
    /// A nucleus smaller than this raises the next step's temperature.
    pub min_nucleus: usize,
    pub temp_boost: f64,
    pub max_tokens: usize,
    /// Longest context fed to the model.
    pub window: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 0.7, temperature: 1.2, min_nucleus: 3, temp_boost: 1.1, max_tokens: 4096, window: 1216, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(GenerateError::Config("p must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenerateError::Config("temperature must be positive"));
        }
        if self.window == 0 {
            return Err(GenerateError::Config("window must be positive"));
        }
        Ok(())
    }

    /// Temperature for a step given the previous step's nucleus size.
    pub fn effective_temperature(&self, prev_nucleus: Option<usize>) -> f64 {
        match prev_nucleus {
            Some(n) if n < self.min_nucleus => self.temperature * self.temp_boost,
            _ => self.temperature,
        }
    }
}

/// The nucleus of `softmax(logits / temperature)`: ids in descending
/// probability order (ties by ascending id) with renormalized weights.
pub fn nucleus(logits: &[f64], temperature: f64, p: f64) -> Vec<(TokenId, f64)> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut probs: Vec<(TokenId, f64)> =
        logits.iter().enumerate().map(|(i, &v)| (i as TokenId, Float::exp((v - max) / temperature))).collect();
    let total: f64 = probs.iter().map(|x| x.1).sum();
    probs.iter_mut().for_each(|x| x.1 /= total);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut size = 0;
    for &(_, q) in &probs {
        mass += q;
        size += 1;
        if mass >= p {
            break;
        }
    }
    probs.truncate(size.max(1));
    let kept: f64 = probs.iter().map(|x| x.1).sum();
    probs.iter_mut().for_each(|x| x.1 /= kept);
    probs
}

/// Samples one token; returns it with the nucleus size.
pub fn nucleus_sample(logits: &[f64], cfg: &SamplerConfig, prev_nucleus: Option<usize>, rng: &mut crate::Rng) -> (TokenId, usize) {
    let set = nucleus(logits, cfg.effective_temperature(prev_nucleus), cfg.p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, q) in &set {
        acc += q;
        if u < acc {
            return (id, set.len());
        }
    }
    (set[set.len() - 1].0, set.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Hold each breakpoint until the next.
    #[default]
    Step,
    /// Interpolate linearly on token index between breakpoints.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub token: usize,
    pub valence: f64,
    pub arousal: f64,
}

/// Valence/arousal as a function of generation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSchedule {
    #[serde(default)]
    pub mode: Interpolation,
    pub breakpoints: Vec<Breakpoint>,
}

impl ConditionSchedule {
    pub fn new(breakpoints: Vec<Breakpoint>, mode: Interpolation) -> Result<Self, GenerateError> {
        let s = Self { mode, breakpoints };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(c: ConditionPair) -> Self {
        Self { mode: Interpolation::Step, breakpoints: alloc::vec![Breakpoint { token: 0, valence: c.valence, arousal: c.arousal }] }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let err = |m: &str| Err(GenerateError::Schedule(m.into()));
        match self.breakpoints.first() {
            None => return err("no breakpoints"),
            Some(b) if b.token != 0 => return err("first breakpoint must be at token 0"),
            _ => {}
        }
        if self.breakpoints.windows(2).any(|w| w[0].token >= w[1].token) {
            return err("token indices must be strictly increasing");
        }
        for b in &self.breakpoints {
            ConditionPair::new(b.valence, b.arousal)
                .map_err(|_| GenerateError::Schedule(alloc::format!("values at token {} outside [-1, 1]", b.token)))?;
        }
        Ok(())
    }

    /// Condition in force when generating token `step`.
    pub fn at(&self, step: usize) -> ConditionPair {
        let i = self.breakpoints.partition_point(|b| b.token <= step) - 1;
        let a = self.breakpoints[i];
        let pair = match (self.mode, self.breakpoints.get(i + 1)) {
            (Interpolation::Linear, Some(b)) => {
                let t = (step - a.token) as f64 / (b.token - a.token) as f64;
                (a.valence + t * (b.valence - a.valence), a.arousal + t * (b.arousal - a.arousal))
            }
            _ => (a.valence, a.arousal),
        };
        ConditionPair { valence: pair.0.clamp(-1.0, 1.0), arousal: pair.1.clamp(-1.0, 1.0) }
    }
}

/// Anything that scores the next token of a context.
pub trait NextToken {
    fn variant(&self) -> Variant;
    /// Longest token context accepted.
    fn max_len(&self) -> usize;
    fn next_logits(&self, context: &[TokenId], condition: Option<ConditionPair>) -> Result<Vec<f64>, ModelError>;
}

impl<T: Scalar> NextToken for Model<T> {
    fn variant(&self) -> Variant {
        self.config.variant
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn next_logits(&self, context: &[TokenId], condition: Option<ConditionPair>) -> Result<Vec<f64>, ModelError> {
        Ok(Model::next_logits(self, context, condition)?.into_iter().map(Scalar::to_f64).collect())
    }
}

/// Seed tokens for a fresh sample.
pub fn seed_tokens(variant: Variant, first: Option<ConditionPair>) -> Result<Vec<TokenId>, GenerateError> {
    let mut seed = Vec::with_capacity(3);
    if variant == Variant::DiscreteToken {
        let c = first.ok_or(GenerateError::Condition { variant, given: false })?;
        seed.extend(condition_tokens(c)?);
    }
    seed.push(START);
    Ok(seed)
}

/// Samples `cfg.max_tokens` tokens after the variant's seed and any primer.
/// Only the newest `min(cfg.window, max_len)` tokens are fed to the model,
/// so discrete condition tokens eventually leave the context while the
/// continuous variants receive the scheduled condition at every step.
pub fn generate<M: NextToken + ?Sized>(
    model: &M,
    schedule: Option<&ConditionSchedule>,
    primer: &[TokenId],
    cfg: &SamplerConfig,
) -> Result<Vec<TokenId>, GenerateError> {
    cfg.validate()?;
    let variant = model.variant();
    if variant.is_conditional() != schedule.is_some() {
        return Err(GenerateError::Condition { variant, given: schedule.is_some() });
    }
    if let Some(s) = schedule {
        s.validate()?;
    }
    let mut seq = seed_tokens(variant, schedule.map(|s| s.at(0)))?;
    seq.extend_from_slice(primer);
    let window = cfg.window.min(model.max_len());
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut prev = None;
    let mut out = Vec::with_capacity(cfg.max_tokens);
    for step in 0..cfg.max_tokens {
        let context = &seq[seq.len().saturating_sub(window)..];
        let condition = match variant {
            Variant::ContinuousToken | Variant::ContinuousConcatenated => schedule.map(|s| s.at(step)),
            _ => None,
        };
        let logits = model.next_logits(context, condition)?;
        let (id, size) = nucleus_sample(&logits, cfg, prev, &mut rng);
        prev = Some(size);
        seq.push(id);
        out.push(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    #[test]
    fn nucleus_hand_example() {
        let logits = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
        let n = nucleus(&logits, 1.0, 0.7);
        assert_eq!(n.len(), 2);
        assert_eq!((n[0].0, n[1].0), (0, 1));
        assert!((n[0].1 - 2.0 / 3.0).abs() < 1e-12 && (n[1].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit() {
        let mut logits = [0.0; 10];
        logits[7] = 1e4;
        let mut rng = crate::seeded_rng(0);
        assert_eq!(nucleus_sample(&logits, &SamplerConfig::default(), None, &mut rng), (7, 1));
    }

    #[test]
    fn temperature_boost() {
        let c = SamplerConfig::default();
        assert!((c.effective_temperature(Some(2)) - 1.32).abs() < 1e-12);
        assert_eq!(c.effective_temperature(Some(3)), 1.2);
        assert_eq!(c.effective_temperature(None), 1.2);
    }

    #[test]
    fn schedule_modes() {
        let pts = alloc::vec![Breakpoint { token: 0, valence: -1.0, arousal: 0.0 }, Breakpoint { token: 10, valence: 1.0, arousal: 0.5 },];
        let lin = ConditionSchedule::new(pts.clone(), Interpolation::Linear).unwrap();
        assert_eq!(lin.at(5), ConditionPair { valence: 0.0, arousal: 0.25 });
        assert_eq!(lin.at(50), ConditionPair { valence: 1.0, arousal: 0.5 });
        let step = ConditionSchedule::new(pts, Interpolation::Step).unwrap();
        assert_eq!(step.at(9).valence, -1.0);
        assert!(ConditionSchedule::new(alloc::vec![Breakpoint { token: 1, valence: 0.0, arousal: 0.0 }], Interpolation::Step).is_err());
    }

    struct Counting {
        longest: Cell<usize>,
    }

    impl NextToken for Counting {
        fn variant(&self) -> Variant {
            Variant::Vanilla
        }
        fn max_len(&self) -> usize {
            16
        }
        fn next_logits(&self, context: &[TokenId], _: Option<ConditionPair>) -> Result<Vec<f64>, ModelError> {
            self.longest.set(self.longest.get().max(context.len()));
            Ok(alloc::vec![0.0; 1007])
        }
    }

    #[test]
    fn window_bounds_context_and_length() {
        let m = Counting { longest: Cell::new(0) };
        let cfg = SamplerConfig { max_tokens: 40, window: 1216, ..Default::default() };
        let out = generate(&m, None, &[], &cfg).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(m.longest.get(), 16);
        assert_eq!(out, generate(&m, None, &[], &cfg).unwrap());
    }
}
