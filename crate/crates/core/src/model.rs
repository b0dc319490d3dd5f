//! Decoder-only transformer with relative position attention and its
//! conditioning variants.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{ConditionPair, TokenId, BASE_VOCAB_SIZE, CONDITIONAL_VOCAB_SIZE};

/// How the valence/arousal condition reaches the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    DiscreteToken,
    ContinuousToken,
    ContinuousConcatenated,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::DiscreteToken, Variant::ContinuousToken, Variant::ContinuousConcatenated];
    pub const CONDITIONAL: [Variant; 3] = [Variant::DiscreteToken, Variant::ContinuousToken, Variant::ContinuousConcatenated];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::DiscreteToken => "discrete-token",
            Variant::ContinuousToken => "continuous-token",
            Variant::ContinuousConcatenated => "continuous-concatenated",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn is_conditional(self) -> bool {
        self != Variant::Vanilla
    }

    /// Extra leading positions the trunk sees beyond the token sequence.
    pub fn prefix_len(self) -> usize {
        if self == Variant::ContinuousToken {
            2
        } else {
            0
        }
    }

    pub fn vocab_size(self) -> usize {
        if self == Variant::DiscreteToken {
            CONDITIONAL_VOCAB_SIZE
        } else {
            BASE_VOCAB_SIZE
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Output stage on top of the trunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Next-token logits at every position.
    #[default]
    Language,
    /// Mean-pooled final states mapped to (valence, arousal).
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub variant: Variant,
    /// Width of the condition slice; only used by the concatenated variant.
    #[serde(default)]
    pub d_cond: usize,
    pub dropout: f64,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    /// 20 layers, width 768, 16 heads, feed-forward 3072, window 1216.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            n_layers: 20,
            d_model: 768,
            n_heads: 16,
            d_ff: 3072,
            max_len: 1216,
            vocab_size: variant.vocab_size(),
            variant,
            d_cond: if variant == Variant::ContinuousConcatenated { 192 } else { 0 },
            dropout: 0.1,
            head: HeadKind::Language,
        }
    }

    pub fn toy(variant: Variant, n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize, max_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            max_len,
            vocab_size: variant.vocab_size(),
            variant,
            d_cond: if variant == Variant::ContinuousConcatenated { d_model / 4 } else { 0 },
            dropout: 0.1,
            head: HeadKind::Language,
        }
    }

    /// Width of the token embedding table.
    pub fn d_token(&self) -> usize {
        self.d_model - self.d_cond
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: String| Err(ModelError::InvalidConfig(why));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("all dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < BASE_VOCAB_SIZE {
            return bad(format!("vocab_size {} below the base vocabulary", self.vocab_size));
        }
        if self.variant == Variant::DiscreteToken && self.vocab_size < CONDITIONAL_VOCAB_SIZE {
            return bad(format!("discrete-token needs vocab_size {CONDITIONAL_VOCAB_SIZE}"));
        }
        let concat = self.variant == Variant::ContinuousConcatenated;
        if concat && (self.d_cond == 0 || self.d_cond >= self.d_model) {
            return bad(format!("d_cond {} must lie in (0, d_model)", self.d_cond));
        }
        if !concat && self.d_cond != 0 {
            return bad(format!("d_cond is only valid for {}", Variant::ContinuousConcatenated));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.head == HeadKind::Regression && self.variant != Variant::Vanilla {
            return bad("regression head requires the vanilla trunk".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let attn = 4 * (d * d + d);
        let ffn = 2 * d * ff + ff + d;
        let norms = 4 * d;
        let trunk = self.n_layers * (attn + ffn + norms) + 2 * d + self.max_len * d;
        let embed = v * self.d_token();
        let head = match self.head {
            HeadKind::Language => d * v + v,
            HeadKind::Regression => 2 * d + 2,
        };
        let cond = match self.variant {
            Variant::ContinuousToken => 2 * (d + d),
            Variant::ContinuousConcatenated => 2 * self.d_cond + self.d_cond,
            _ => 0,
        };
        trunk + embed + head + cond
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{variant} model {}", if *.given { "does not take a condition" } else { "requires a condition" })]
    Condition { variant: Variant, given: bool },
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: TokenId, vocab: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("cannot transfer weights: {reason}; offending tensors: {tensors:?}")]
    Transfer { reason: String, tensors: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        Bound { index: &self.index, vars }
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound<'a> {
    index: &'a BTreeMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Gradients in parameter order; parameters that did not influence the
    /// loss get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect()
    }
}

const INIT_STD: f64 = 0.02;

fn layer_name(i: usize, part: &str) -> String {
    format!("layers.{i}.{part}")
}

/// Relative attention for one layer on per-head `[H, L, dh]` projections.
/// `rel` is the `[H, max_len, dh]` table indexed by backward distance;
/// distances beyond the table reuse its last row.
pub fn relative_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, rel: Var, dropout: f64) -> Result<Var, TensorError> {
    let shape = tape.shape(q).to_vec();
    let (l, dh) = (shape[1], shape[2]);
    let max_len = tape.shape(rel)[1];
    let kt = tape.transpose(k)?;
    let content = tape.matmul(q, kt)?;
    // Column c of the pre-skew matrix holds backward distance L-1-c.
    let rows: Vec<usize> = (0..l).map(|c| (l - 1 - c).min(max_len - 1)).collect();
    let er = tape.index_select(rel, 1, &rows)?;
    let ert = tape.transpose(er)?;
    let qe = tape.matmul(q, ert)?;
    let positional = tape.skew(qe)?;
    let logits = tape.add(content, positional)?;
    let logits = tape.scale(logits, T::from_f64(1.0 / Float::sqrt(dh as f64)));
    let mask: Vec<bool> = (0..shape[0] * l * l).map(|f| (f % l) > (f / l) % l).collect();
    let logits = tape.masked_fill(logits, &mask, T::neg_infinity())?;
    let weights = tape.softmax(logits);
    let weights = tape.dropout(weights, dropout);
    tape.matmul(weights, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: matrices and embeddings `N(0, 0.02)`, biases zero,
    /// layer-norm gains one.
    pub fn new(config: ModelConfig, rng: &mut crate::Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, ff, v, h) = (config.d_model, config.d_ff, config.vocab_size, config.n_heads);
        let mut p = ParamSet::new();
        let mut normal = |shape: &[usize]| Tensor::randn(shape, INIT_STD, rng);
        p.insert("tok_emb", normal(&[v, config.d_token()]));
        match config.variant {
            Variant::ContinuousToken => {
                for which in ["valence", "arousal"] {
                    p.insert(format!("cond.{which}.w"), normal(&[1, d]));
                    p.insert(format!("cond.{which}.b"), Tensor::zeros(&[d]));
                }
            }
            Variant::ContinuousConcatenated => {
                p.insert("cond.w", normal(&[2, config.d_cond]));
                p.insert("cond.b", Tensor::zeros(&[config.d_cond]));
            }
            _ => {}
        }
        p.insert("rel_emb", normal(&[h, config.max_len, d / h]));
        for i in 0..config.n_layers {
            p.insert(layer_name(i, "ln1.g"), Tensor::full(&[d], T::one()));
            p.insert(layer_name(i, "ln1.b"), Tensor::zeros(&[d]));
            for proj in ["q", "k", "v", "o"] {
                p.insert(layer_name(i, &format!("attn.w{proj}")), normal(&[d, d]));
                p.insert(layer_name(i, &format!("attn.b{proj}")), Tensor::zeros(&[d]));
            }
            p.insert(layer_name(i, "ln2.g"), Tensor::full(&[d], T::one()));
            p.insert(layer_name(i, "ln2.b"), Tensor::zeros(&[d]));
            p.insert(layer_name(i, "ff1.w"), normal(&[d, ff]));
            p.insert(layer_name(i, "ff1.b"), Tensor::zeros(&[ff]));
            p.insert(layer_name(i, "ff2.w"), normal(&[ff, d]));
            p.insert(layer_name(i, "ff2.b"), Tensor::zeros(&[d]));
        }
        p.insert("ln_f.g", Tensor::full(&[d], T::one()));
        p.insert("ln_f.b", Tensor::zeros(&[d]));
        match config.head {
            HeadKind::Language => {
                p.insert("head.w", normal(&[d, v]));
                p.insert("head.b", Tensor::zeros(&[v]));
            }
            HeadKind::Regression => {
                p.insert("reg.w", normal(&[d, 2]));
                p.insert("reg.b", Tensor::zeros(&[2]));
            }
        }
        Ok(Self { config, params: p })
    }

    /// Wraps existing tensors after checking names and shapes against a
    /// freshly built model of the same config.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let reference = Model::<T>::new(config.clone(), &mut crate::seeded_rng(0))?;
        let mut offending = Vec::new();
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => offending.push(name.to_string()),
            }
        }
        offending.extend(params.names().iter().filter(|n| reference.params.get(n).is_none()).cloned());
        if !offending.is_empty() {
            return Err(ModelError::Transfer { reason: "tensors do not match the config".into(), tensors: offending });
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, tokens: &[TokenId], condition: Option<ConditionPair>) -> Result<(), ModelError> {
        let variant = self.config.variant;
        // The discrete-token condition lives in the token stream, so a pair
        // is accepted but not required.
        let ok = match variant {
            Variant::Vanilla => condition.is_none(),
            Variant::DiscreteToken => true,
            Variant::ContinuousToken | Variant::ContinuousConcatenated => condition.is_some(),
        };
        if !ok {
            return Err(ModelError::Condition { variant, given: condition.is_some() });
        }
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_len });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::Vocab { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Input rows `[P + L, d]` for the trunk, before embedding dropout.
    fn embed(&self, tape: &mut Tape<T>, b: &Bound<'_>, tokens: &[TokenId], condition: Option<ConditionPair>) -> Result<Var, ModelError> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.embedding(b.var("tok_emb")?, &ids)?;
        Ok(match (self.config.variant, condition) {
            (Variant::ContinuousToken, Some(c)) => {
                let mut rows = Vec::with_capacity(3);
                for (which, value) in [("valence", c.valence), ("arousal", c.arousal)] {
                    let x = tape.constant(Tensor::scalar(T::from_f64(value)).reshape(&[1, 1])?);
                    let y = tape.matmul(x, b.var(&format!("cond.{which}.w"))?)?;
                    rows.push(tape.add_bias(y, b.var(&format!("cond.{which}.b"))?)?);
                }
                rows.push(emb);
                tape.concat(&rows, 0)?
            }
            (Variant::ContinuousConcatenated, Some(c)) => {
                let x = tape.constant(Tensor::new(&[1, 2], vec![T::from_f64(c.valence), T::from_f64(c.arousal)])?);
                let y = tape.matmul(x, b.var("cond.w")?)?;
                let y = tape.add_bias(y, b.var("cond.b")?)?;
                let y = tape.repeat_rows(y, tokens.len())?;
                tape.concat(&[y, emb], 1)?
            }
            _ => emb,
        })
    }

    /// Transformer blocks and the final norm over `[n, d]` input rows.
    pub fn trunk(&self, tape: &mut Tape<T>, b: &Bound<'_>, x: Var) -> Result<Var, ModelError> {
        let c = &self.config;
        let n = tape.shape(x)[0];
        let (h, dh) = (c.n_heads, c.d_head());
        let rel = b.var("rel_emb")?;
        let mut x = tape.dropout(x, c.dropout);
        for i in 0..c.n_layers {
            let v = |part: &str| b.var(&layer_name(i, part));
            let hn = tape.layer_norm(x, v("ln1.g")?, v("ln1.b")?)?;
            let mut heads = [hn; 3];
            for (slot, proj) in heads.iter_mut().zip(["q", "k", "v"]) {
                let y = tape.matmul(hn, v(&format!("attn.w{proj}"))?)?;
                let y = tape.add_bias(y, v(&format!("attn.b{proj}"))?)?;
                let y = tape.reshape(y, &[n, h, dh])?;
                *slot = tape.permute(y, &[1, 0, 2])?;
            }
            let att = relative_attention(tape, heads[0], heads[1], heads[2], rel, c.dropout)?;
            let att = tape.permute(att, &[1, 0, 2])?;
            let att = tape.reshape(att, &[n, c.d_model])?;
            let att = tape.matmul(att, v("attn.wo")?)?;
            let att = tape.add_bias(att, v("attn.bo")?)?;
            x = tape.add(x, att)?;

            let hn = tape.layer_norm(x, v("ln2.g")?, v("ln2.b")?)?;
            let y = tape.matmul(hn, v("ff1.w")?)?;
            let y = tape.add_bias(y, v("ff1.b")?)?;
            let y = tape.relu(y);
            let y = tape.matmul(y, v("ff2.w")?)?;
            let y = tape.add_bias(y, v("ff2.b")?)?;
            let y = tape.dropout(y, c.dropout);
            x = tape.add(x, y)?;
        }
        Ok(tape.layer_norm(x, b.var("ln_f.g")?, b.var("ln_f.b")?)?)
    }

    /// Next-token logits `[L, vocab]`, one row per input token. For the
    /// continuous-token variant the two condition rows are dropped.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound<'_>,
        tokens: &[TokenId],
        condition: Option<ConditionPair>,
    ) -> Result<Var, ModelError> {
        let logits = self.forward_full(tape, b, tokens, condition)?;
        let prefix = self.config.variant.prefix_len();
        if prefix == 0 {
            return Ok(logits);
        }
        Ok(tape.slice(logits, 0, prefix, tokens.len())?)
    }

    /// Logits for every trunk position, including any condition prefix.
    pub fn forward_full(
        &self,
        tape: &mut Tape<T>,
        b: &Bound<'_>,
        tokens: &[TokenId],
        condition: Option<ConditionPair>,
    ) -> Result<Var, ModelError> {
        if self.config.head != HeadKind::Language {
            return Err(ModelError::InvalidConfig("forward needs a language head".into()));
        }
        self.check_inputs(tokens, condition)?;
        let x = self.embed(tape, b, tokens, condition)?;
        self.head_from_rows(tape, b, x)
    }

    /// Trunk plus language head on precomputed input rows.
    pub fn head_from_rows(&self, tape: &mut Tape<T>, b: &Bound<'_>, rows: Var) -> Result<Var, ModelError> {
        let x = self.trunk(tape, b, rows)?;
        let y = tape.matmul(x, b.var("head.w")?)?;
        Ok(tape.add_bias(y, b.var("head.b")?)?)
    }

    /// Evaluation-mode logits `[L, vocab]`.
    pub fn logits(&self, tokens: &[TokenId], condition: Option<ConditionPair>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, tokens, condition)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode logits of the last position only.
    pub fn next_logits(&self, tokens: &[TokenId], condition: Option<ConditionPair>) -> Result<Vec<T>, ModelError> {
        let all = self.logits(tokens, condition)?;
        Ok(all.row(all.rows() - 1).to_vec())
    }

    /// Regression output `[1, 2]`: final states averaged over positions
    /// where `keep` is true, then a linear map.
    pub fn regress(&self, tape: &mut Tape<T>, b: &Bound<'_>, tokens: &[TokenId], keep: &[bool]) -> Result<Var, ModelError> {
        if self.config.head != HeadKind::Regression {
            return Err(ModelError::InvalidConfig("regress needs a regression head".into()));
        }
        self.check_inputs(tokens, None)?;
        let x = self.embed(tape, b, tokens, None)?;
        let x = self.trunk(tape, b, x)?;
        let pooled = tape.mean_rows(x, keep)?;
        let y = tape.matmul(pooled, b.var("reg.w")?)?;
        Ok(tape.add_bias(y, b.var("reg.b")?)?)
    }

    /// Evaluation-mode (valence, arousal) estimate for one window.
    pub fn predict_pair(&self, tokens: &[TokenId], keep: &[bool]) -> Result<(f64, f64), ModelError> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.regress(&mut tape, &b, tokens, keep)?;
        let d = tape.value(out).data();
        Ok((d[0].to_f64(), d[1].to_f64()))
    }
}

/// How the concatenated variant's narrower embedding table is seeded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingTransfer {
    /// Keep the first `d_token` columns of the pretrained table.
    #[default]
    Truncate,
    /// Draw a new table.
    Fresh,
}

/// Initializes a conditional model from a pretrained vanilla one. Trunk
/// tensors are copied verbatim; new tensors come from `rng`.
pub fn transfer_weights<T: Scalar>(
    vanilla: &Model<T>,
    target: ModelConfig,
    embedding: EmbeddingTransfer,
    rng: &mut crate::Rng,
) -> Result<Model<T>, ModelError> {
    let src = &vanilla.config;
    if src.variant != Variant::Vanilla || src.head != HeadKind::Language {
        return Err(ModelError::Transfer { reason: "source must be a vanilla language model".into(), tensors: vec![] });
    }
    let mut fresh = Model::<T>::new(target.clone(), rng)?;
    let mut offending = Vec::new();
    let names: Vec<String> = fresh.params.names().to_vec();
    for name in &names {
        let Some(old) = vanilla.params.get(name) else {
            if !name.starts_with("cond.") {
                offending.push(name.clone());
            }
            continue;
        };
        let new = fresh.params.get_mut(name).expect("name from the same set");
        match name.as_str() {
            "tok_emb" => {
                let (rows, cols) = (old.shape()[0], old.shape()[1]);
                let (new_rows, new_cols) = (new.shape()[0], new.shape()[1]);
                if new_rows < rows || new_cols > cols {
                    offending.push(name.clone());
                    continue;
                }
                if new_cols < cols && embedding == EmbeddingTransfer::Fresh {
                    continue;
                }
                let src_data = old.data();
                let dst = new.data_mut();
                for r in 0..rows {
                    dst[r * new_cols..(r + 1) * new_cols].copy_from_slice(&src_data[r * cols..r * cols + new_cols]);
                }
            }
            "head.w" | "head.b" => {
                let old_v = old.cols();
                let new_v = new.cols();
                if new_v < old_v || new.rows() != old.rows() {
                    offending.push(name.clone());
                    continue;
                }
                let src_data = old.data();
                let dst = new.data_mut();
                for r in 0..old.rows() {
                    dst[r * new_v..r * new_v + old_v].copy_from_slice(&src_data[r * old_v..(r + 1) * old_v]);
                }
            }
            _ if old.shape() == new.shape() => new.data_mut().copy_from_slice(old.data()),
            _ => offending.push(name.clone()),
        }
    }
    if !offending.is_empty() {
        return Err(ModelError::Transfer { reason: "trunk configs differ".into(), tensors: offending });
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant) -> ModelConfig {
        ModelConfig::toy(variant, 2, 64, 4, 256, 32)
    }

    #[test]
    fn enumeration_matches_formula() {
        for variant in Variant::ALL {
            let c = toy(variant);
            let m = Model::<f32>::new(c.clone(), &mut crate::seeded_rng(0)).unwrap();
            assert_eq!(m.params.numel(), c.param_count(), "{variant}");
        }
        let mut reg = toy(Variant::Vanilla);
        reg.head = HeadKind::Regression;
        let m = Model::<f32>::new(reg.clone(), &mut crate::seeded_rng(0)).unwrap();
        assert_eq!(m.params.numel(), reg.param_count());
    }

    #[test]
    fn full_scale_size() {
        let n = ModelConfig::full_scale(Variant::Vanilla).param_count() as f64;
        assert!((n - 145e6).abs() / 145e6 < 0.05, "{n}");
    }

    #[test]
    fn config_invariants() {
        let mut c = toy(Variant::ContinuousConcatenated);
        c.d_cond = 16;
        assert_eq!(c.d_token() + c.d_cond, 64);
        c.validate().unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut v = toy(Variant::Vanilla);
        v.d_cond = 8;
        assert!(v.validate().is_err());
    }

    #[test]
    fn condition_contract() {
        let m = Model::<f32>::new(toy(Variant::ContinuousToken), &mut crate::seeded_rng(0)).unwrap();
        assert!(matches!(m.logits(&[1005], None), Err(ModelError::Condition { given: false, .. })));
        let v = Model::<f32>::new(toy(Variant::Vanilla), &mut crate::seeded_rng(0)).unwrap();
        let c = ConditionPair::new(0.0, 0.0).unwrap();
        assert!(matches!(v.logits(&[1005], Some(c)), Err(ModelError::Condition { given: true, .. })));
        assert!(matches!(v.logits(&[1005; 33], None), Err(ModelError::TooLong { len: 33, max: 32 })));
        let d = Model::<f32>::new(toy(Variant::DiscreteToken), &mut crate::seeded_rng(0)).unwrap();
        assert_eq!(d.logits(&[1009, 1014, 1005], Some(c)).unwrap(), d.logits(&[1009, 1014, 1005], None).unwrap());
    }

    #[test]
    fn shapes_per_variant() {
        let tokens = [1005, 12, 900, 452];
        for variant in Variant::ALL {
            let m = Model::<f32>::new(toy(variant), &mut crate::seeded_rng(1)).unwrap();
            let cond = matches!(variant, Variant::ContinuousToken | Variant::ContinuousConcatenated)
                .then(|| ConditionPair::new(0.2, -0.4).unwrap());
            let mut tape = Tape::new();
            let b = m.params.bind(&mut tape, false);
            let full = m.forward_full(&mut tape, &b, &tokens, cond).unwrap();
            assert_eq!(tape.shape(full), [4 + variant.prefix_len(), variant.vocab_size()]);
            assert_eq!(m.logits(&tokens, cond).unwrap().shape(), [4, variant.vocab_size()]);
        }
    }

    #[test]
    fn discrete_transfer_keeps_base_rows() {
        let base = Model::<f32>::new(toy(Variant::Vanilla), &mut crate::seeded_rng(2)).unwrap();
        let t = transfer_weights(&base, toy(Variant::DiscreteToken), EmbeddingTransfer::Truncate, &mut crate::seeded_rng(3)).unwrap();
        let (old, new) = (base.params.get("tok_emb").unwrap(), t.params.get("tok_emb").unwrap());
        assert_eq!(&new.data()[..old.numel()], old.data());
        assert_eq!(new.shape(), [CONDITIONAL_VOCAB_SIZE, 64]);
        assert_eq!(base.params.get("layers.1.ff2.w"), t.params.get("layers.1.ff2.w"));
    }

    #[test]
    fn mismatched_trunk_lists_tensors() {
        let base = Model::<f32>::new(toy(Variant::Vanilla), &mut crate::seeded_rng(2)).unwrap();
        let mut target = toy(Variant::ContinuousToken);
        target.d_ff = 128;
        let err = transfer_weights(&base, target, EmbeddingTransfer::Truncate, &mut crate::seeded_rng(3)).unwrap_err();
        let ModelError::Transfer { tensors, .. } = err else { panic!("{err}") };
        assert!(tensors.contains(&"layers.0.ff1.w".to_string()));
        assert!(!tensors.contains(&"layers.0.attn.wq".to_string()));
    }
}
