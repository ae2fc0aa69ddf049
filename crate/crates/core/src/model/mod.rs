//! Patch embedding, the k-query cross-attention encoder, the fingerprint-only
//! masked decoder, and the attention-pooling classifier.
//!
//! Graph-level builders ([`encode`], [`decode`], [`attention_pool`],
//! [`classify`]) record into a caller-owned [`Graph`] so a training step can
//! differentiate through them; [`Model`] wraps them for plain inference.

mod layers;
mod params;
mod patch;


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Axis, Graph, Tensor, TensorError, Var};
use crate::synthetic::TimeSeriesSample;

pub use params::{Bound, ParamGroup, ParamStore};
pub use patch::{patchify, positional_table, sinusoidal_embedding, PatchSequence};

use layers::{attention, feed_forward, linear, norm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("input series is empty")]
    EmptyInput,
    #[error("encoder needs at least one visible patch")]
    NoVisiblePatches,
    #[error("decoder needs at least one masked position")]
    NoMaskedPositions,
    #[error("model expects {expected} channels, sample has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("patch position {position} is padded or outside 0..{n}")]
    BadPosition { position: usize, n: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter layout does not match the model config")]
    LayoutMismatch,
}

/// What the encoder sees in place of masked patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// Masked patches are removed from the encoder's context.
    #[default]
    DropMasked,
    /// Masked patches are replaced by the mask token plus their position.
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub k: usize,
    pub d: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_channels: usize,
    pub n_classes: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_ratio: usize,
    pub init_std: f64,
    pub norm_eps: f64,
    pub encoder_input: EncoderInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 20,
            k: 8,
            d: 128,
            n_heads: 8,
            encoder_layers: 6,
            decoder_layers: 2,
            n_channels: 1,
            n_classes: 3,
            ffn_ratio: 4,
            init_std: 0.02,
            norm_eps: 1e-5,
            encoder_input: EncoderInput::DropMasked,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("patch_size", self.patch_size),
            ("k", self.k),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("n_channels", self.n_channels),
            ("n_classes", self.n_classes),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig {
                field: "n_heads",
                reason: format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads),
            });
        }
        for (field, v) in [("init_std", self.init_std), ("norm_eps", self.norm_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidConfig {
                    field,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.n_channels
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_ratio
    }
}

/// The `k × d` token set produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintTokens(Tensor);

impl FingerprintTokens {
    pub fn new(values: Tensor, k: usize, d: usize) -> Result<Self, ModelError> {
        if values.shape() != [k, d] {
            return Err(TensorError::InvalidShape {
                shape: values.shape().to_vec(),
                len: k * d,
            }
            .into());
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn d(&self) -> usize {
        self.0.cols()
    }
}

/// Graph handles produced by [`encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: Var,
    /// Cross-attention weights, `[layer][head]`, each `k × inputs.len()`.
    pub cross_attention: Vec<Vec<Var>>,
    /// Patch position of each encoder context row.
    pub inputs: Vec<usize>,
}

fn check_positions(seq: &PatchSequence, positions: &[usize]) -> Result<(), ModelError> {
    for &position in positions {
        if position >= seq.len() || seq.padded[position] {
            return Err(ModelError::BadPosition { position, n: seq.len() });
        }
    }
    Ok(())
}

/// Projects the patches at `positions` to `d` and adds their positional embeddings.
pub fn embed(g: &mut Graph, p: &Bound, config: &ModelConfig, seq: &PatchSequence, positions: &[usize]) -> Result<Var, ModelError> {
    check_positions(seq, positions)?;
    let raw = g.constant(seq.gather(positions));
    let e = linear(g, p, "embed", raw)?;
    let pe = g.constant(positional_table(positions, config.d));
    Ok(g.add(e, pe)?)
}

/// Runs the encoder with `visible` patches as context.
///
/// `masked` is consulted only when the config asks for placeholders.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    seq: &PatchSequence,
    visible: &[usize],
    masked: &[usize],
) -> Result<Encoded, ModelError> {
    if visible.is_empty() {
        return Err(ModelError::NoVisiblePatches);
    }
    let mut context = embed(g, p, config, seq, visible)?;
    let mut inputs = visible.to_vec();
    if config.encoder_input == EncoderInput::Placeholder && !masked.is_empty() {
        check_positions(seq, masked)?;
        let holders = mask_queries(g, p, config, masked)?;
        context = g.concat(&[context, holders], Axis::Rows)?;
        inputs.extend_from_slice(masked);
    }

    let eps = config.norm_eps;
    let mut tokens = p.var("queries")?;
    let mut cross_attention = Vec::with_capacity(config.encoder_layers);
    for l in 0..config.encoder_layers {
        let pre = format!("enc.{l}");
        let q = norm(g, p, &format!("{pre}.cross.ln_q"), tokens, eps)?;
        let kv = norm(g, p, &format!("{pre}.cross.ln_kv"), context, eps)?;
        let mut weights = Vec::with_capacity(config.n_heads);
        let a = attention(g, p, &format!("{pre}.cross.attn"), q, kv, config.n_heads, Some(&mut weights))?;
        tokens = g.add(tokens, a)?;
        cross_attention.push(weights);

        let s = norm(g, p, &format!("{pre}.self.ln"), tokens, eps)?;
        let a = attention(g, p, &format!("{pre}.self.attn"), s, s, config.n_heads, None)?;
        tokens = g.add(tokens, a)?;

        let f = feed_forward(g, p, &format!("{pre}.ffn"), tokens, eps)?;
        tokens = g.add(tokens, f)?;
    }
    let tokens = norm(g, p, "enc.out_ln", tokens, eps)?;
    Ok(Encoded {
        tokens,
        cross_attention,
        inputs,
    })
}

/// Mask token content plus the positional embedding of each position.
fn mask_queries(g: &mut Graph, p: &Bound, config: &ModelConfig, positions: &[usize]) -> Result<Var, ModelError> {
    let pe = g.constant(positional_table(positions, config.d));
    Ok(g.add_row(pe, p.var("mask_token")?)?)
}

/// Reconstructs the patches at `masked_positions` from the tokens alone.
///
/// Returns `masked_positions.len() × patch_dim` values.
pub fn decode(g: &mut Graph, p: &Bound, config: &ModelConfig, tokens: Var, masked_positions: &[usize]) -> Result<Var, ModelError> {
    if masked_positions.is_empty() {
        return Err(ModelError::NoMaskedPositions);
    }
    let eps = config.norm_eps;
    let mut h = mask_queries(g, p, config, masked_positions)?;
    for l in 0..config.decoder_layers {
        let pre = format!("dec.{l}");
        let q = norm(g, p, &format!("{pre}.cross.ln_q"), h, eps)?;
        let kv = norm(g, p, &format!("{pre}.cross.ln_kv"), tokens, eps)?;
        let a = attention(g, p, &format!("{pre}.cross.attn"), q, kv, config.n_heads, None)?;
        h = g.add(h, a)?;
        let f = feed_forward(g, p, &format!("{pre}.ffn"), h, eps)?;
        h = g.add(h, f)?;
    }
    let h = norm(g, p, "dec.out_ln", h, eps)?;
    linear(g, p, "dec.out", h)
}

/// Pools tokens with softmax weights over the given `1 × k` scores.
pub fn pool_with_scores(g: &mut Graph, tokens: Var, scores: Var) -> Result<(Var, Var), ModelError> {
    let alpha = g.softmax_rows(scores)?;
    let z = g.matmul(alpha, tokens)?;
    Ok((z, alpha))
}

/// `α = softmax(F' q)`, `z = Σ α_i f'_i`; returns `(z: 1 × d, α: 1 × k)`.
pub fn attention_pool(g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, Var), ModelError> {
    let scores = g.matmul(tokens, p.var("pool.query")?)?;
    let scores = g.transpose(scores)?;
    pool_with_scores(g, tokens, scores)
}

/// Linear classifier on the pooled vector.
pub fn classify(g: &mut Graph, p: &Bound, z: Var) -> Result<Var, ModelError> {
    linear(g, p, "head", z)
}

/// Full inference output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: FingerprintTokens,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub alpha: Vec<f64>,
    pub z: Vec<f64>,
    /// `k × n_patches` cross-attention averaged over heads and layers; padded
    /// patches get zero weight, so each row sums to one.
    pub attention: Tensor,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Adopts loaded parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = ParamStore::init(&config, 0)?;
        if !reference.same_layout(&params) {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(Self { config, params })
    }

    pub fn patchify(&self, sample: &TimeSeriesSample) -> Result<PatchSequence, ModelError> {
        if sample.channels != self.config.n_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.config.n_channels,
                got: sample.channels,
            });
        }
        patchify(sample, self.config.patch_size)
    }

    fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, |_| false)
    }

    /// Embeddings of every patch, `n_patches × d`.
    pub fn patch_embed(&self, seq: &PatchSequence) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let mut all = seq.clone();
        all.padded.iter_mut().for_each(|x| *x = false);
        let e = embed(&mut g, &p, &self.config, &all, &all.positions)?;
        Ok(g.value(e).clone())
    }

    /// Tokens from an explicit visible/masked split.
    pub fn encode(&self, seq: &PatchSequence, visible: &[usize], masked: &[usize]) -> Result<FingerprintTokens, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let enc = encode(&mut g, &p, &self.config, seq, visible, masked)?;
        FingerprintTokens::new(g.value(enc.tokens).clone(), self.config.k, self.config.d)
    }

    /// Reconstruction from cached tokens; no other input reaches the decoder.
    pub fn decode(&self, tokens: &FingerprintTokens, masked_positions: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let f = g.constant(tokens.values().clone());
        let out = decode(&mut g, &p, &self.config, f, masked_positions)?;
        Ok(g.value(out).clone())
    }

    /// Encodes the whole series and runs the classification path.
    pub fn predict(&self, sample: &TimeSeriesSample) -> Result<Prediction, ModelError> {
        let seq = self.patchify(sample)?;
        let usable = seq.usable();
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let enc = encode(&mut g, &p, &self.config, &seq, &usable, &[])?;
        let (z, alpha) = attention_pool(&mut g, &p, enc.tokens)?;
        let logits = classify(&mut g, &p, z)?;

        let k = self.config.k;
        let mut attention = Tensor::zeros(&[k, seq.len()]);
        let maps: Vec<&Tensor> = enc.cross_attention.iter().flatten().map(|&v| g.value(v)).collect();
        let w = 1.0 / maps.len() as f64;
        for m in maps {
            for i in 0..k {
                for (col, &pos) in enc.inputs.iter().enumerate() {
                    attention.data_mut()[i * seq.len() + pos] += w * m.get(i, col);
                }
            }
        }

        let logits = g.value(logits).data().to_vec();
        Ok(Prediction {
            tokens: FingerprintTokens::new(g.value(enc.tokens).clone(), k, self.config.d)?,
            probabilities: softmax(&logits),
            logits,
            alpha: g.value(alpha).data().to_vec(),
            z: g.value(z).data().to_vec(),
            attention,
        })
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
