//! Decoder-only transformer: Llama-style pre-norm blocks with biases in every
//! linear layer, per-head QK normalization, SwiGLU feed-forward, rotary
//! positions and tied input/output embeddings.

pub mod checkpoint;
mod config;

pub use config::{count_params, rope_base_for_context, ModelConfig, ParamCount, PADDED_VOCAB, ROPE_BASE_4096_ALT};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

/// The single RNG type used for initialization, dropout and shuffling.
pub type Rng = ChaCha8Rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} at position {position} is outside the vocabulary ({vocab})")]
    TokenOutOfRange { position: usize, token: u32, vocab: usize },
    #[error("sequence length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Indices into [`Model::params`] for one block.
#[derive(Debug, Clone)]
struct LayerSlots {
    attn_norm: usize,
    qkv_w: usize,
    qkv_b: Option<usize>,
    q_norm: Option<usize>,
    k_norm: Option<usize>,
    out_w: usize,
    out_b: Option<usize>,
    ffn_norm: usize,
    gate_w: usize,
    gate_b: Option<usize>,
    up_w: usize,
    up_b: Option<usize>,
    down_w: usize,
    down_b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: usize,
    layers: Vec<LayerSlots>,
    final_norm: usize,
    lm_head: Option<usize>,
}

impl Layout {
    fn resolve(config: &ModelConfig, names: &[String]) -> Self {
        let find = |n: String| names.iter().position(|x| *x == n);
        let req = |n: String| find(n.clone()).unwrap_or_else(|| panic!("missing tensor {n}"));
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerSlots {
                    attn_norm: req(p("attn_norm.scale")),
                    qkv_w: req(p("attn.qkv.weight")),
                    qkv_b: find(p("attn.qkv.bias")),
                    q_norm: find(p("attn.q_norm.scale")),
                    k_norm: find(p("attn.k_norm.scale")),
                    out_w: req(p("attn.out.weight")),
                    out_b: find(p("attn.out.bias")),
                    ffn_norm: req(p("ffn_norm.scale")),
                    gate_w: req(p("ffn.gate.weight")),
                    gate_b: find(p("ffn.gate.bias")),
                    up_w: req(p("ffn.up.weight")),
                    up_b: find(p("ffn.up.bias")),
                    down_w: req(p("ffn.down.weight")),
                    down_b: find(p("ffn.down.bias")),
                }
            })
            .collect();
        Layout {
            embedding: req("embedding".into()),
            layers,
            final_norm: req("final_norm.scale".into()),
            lm_head: find("lm_head".into()),
        }
    }
}

/// Whether dropout is active for a forward pass.
pub enum Mode<'a> {
    Train { rng: &'a mut Rng },
    Eval,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model. Matrices are drawn from N(0, 0.02),
    /// with the two residual-output projections further scaled by
    /// `1/sqrt(2 * layers)`; biases start at zero and norm scales at one.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".scale") {
                Tensor::full(&shape, T::one())
            } else {
                let s = if name.ends_with("attn.out.weight") || name.ends_with("ffn.down.weight") {
                    residual_scale
                } else {
                    1.0
                };
                Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng) * s))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self::assemble(config.clone(), names, params))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Self {
        let layout = Layout::resolve(&config, &names);
        Self {
            config,
            names,
            params,
            layout,
        }
    }

    /// Rebuilds a model from named tensors, checking each against the
    /// layout `config` implies. The error names the first mismatch.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.param_shapes();
        let mut lookup: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut names = Vec::with_capacity(expected.len());
        let mut params = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = lookup
                .remove(&name)
                .ok_or_else(|| ModelError::Config(format!("tensor {name} missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        if let Some(extra) = lookup.keys().min() {
            return Err(ModelError::Config(format!("unexpected tensor {extra}")));
        }
        Ok(Self::assemble(config.clone(), names, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.params[self.layout.embedding]
    }

    /// The output projection. With tied embeddings this is the embedding
    /// tensor itself, not a copy.
    pub fn lm_head(&self) -> &Tensor<T> {
        &self.params[self.layout.lm_head.unwrap_or(self.layout.embedding)]
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn record_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn check_tokens(&self, tokens: &[u32], seq: usize) -> Result<(), ModelError> {
        if seq > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                context: self.config.context_length,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab)
        {
            return Err(ModelError::TokenOutOfRange {
                position,
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var, ModelError> {
        let p = self.config.dropout_p;
        let Mode::Train { rng } = mode else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let m = tape.constant(mask);
        Ok(tape.mul(x, m)?)
    }

    fn linear(tape: &mut Tape<T>, vars: &[Var], x: Var, w: usize, b: Option<usize>) -> Result<Var, ModelError> {
        let y = tape.matmul(x, vars[w])?;
        Ok(match b {
            Some(b) => tape.add(y, vars[b])?,
            None => y,
        })
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, scale: Var) -> Result<Var, ModelError> {
        let n = tape.rms_normalize(x, self.config.norm_eps)?;
        Ok(tape.mul(n, scale)?)
    }

    /// Logits `[batch, seq, vocab]` for `tokens` laid out as `batch` rows of
    /// `seq` ids. `vars` must come from [`Model::record`] on the same tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        seq: usize,
        mut mode: Mode<'_>,
    ) -> Result<Var, ModelError> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(ModelError::Config(format!(
                "{} tokens cannot form a {batch}x{seq} batch",
                tokens.len()
            )));
        }
        self.check_tokens(tokens, seq)?;
        let c = &self.config;
        let (h, nh, hd) = (c.hidden, c.heads, c.head_dim());
        let attn_scale = T::of(1.0 / (hd as f64).sqrt());
        let mut x = tape.embedding(vars[self.layout.embedding], tokens, &[batch, seq])?;
        for slots in &self.layout.layers {
            let a = self.norm(tape, x, vars[slots.attn_norm])?;
            let qkv = Self::linear(tape, vars, a, slots.qkv_w, slots.qkv_b)?;
            let mut heads = Vec::with_capacity(3);
            for i in 0..3 {
                let part = tape.slice(qkv, 2, i * h, h)?;
                let part = tape.reshape(part, &[batch, seq, nh, hd])?;
                heads.push(tape.permute(part, &[0, 2, 1, 3])?);
            }
            let (mut q, mut k, v) = (heads[0], heads[1], heads[2]);
            if let (Some(qn), Some(kn)) = (slots.q_norm, slots.k_norm) {
                (q, k) = self.qk_normalize(tape, q, k, vars[qn], vars[kn])?;
            }
            q = tape.rope(q, c.rope_base)?;
            k = tape.rope(k, c.rope_base)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, attn_scale)?;
            let probs = tape.causal_softmax(scores)?;
            let probs = self.dropout(tape, probs, &mut mode)?;
            let o = tape.matmul(probs, v)?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[batch, seq, h])?;
            let o = Self::linear(tape, vars, o, slots.out_w, slots.out_b)?;
            let o = self.dropout(tape, o, &mut mode)?;
            x = tape.add(x, o)?;

            let f = self.norm(tape, x, vars[slots.ffn_norm])?;
            let g = Self::linear(tape, vars, f, slots.gate_w, slots.gate_b)?;
            let g = tape.silu(g)?;
            let u = Self::linear(tape, vars, f, slots.up_w, slots.up_b)?;
            let gu = tape.mul(g, u)?;
            let d = Self::linear(tape, vars, gu, slots.down_w, slots.down_b)?;
            let d = self.dropout(tape, d, &mut mode)?;
            x = tape.add(x, d)?;
        }
        let x = self.norm(tape, x, vars[self.layout.final_norm])?;
        let head = vars[self.layout.lm_head.unwrap_or(self.layout.embedding)];
        Ok(tape.matmul_t(x, head)?)
    }

    /// Per-head RMS normalization of queries and keys over the head
    /// dimension, followed by learned per-dimension scales shared across heads.
    pub fn qk_normalize(
        &self,
        tape: &mut Tape<T>,
        q: Var,
        k: Var,
        q_scale: Var,
        k_scale: Var,
    ) -> Result<(Var, Var), ModelError> {
        let q = self.norm(tape, q, q_scale)?;
        let k = self.norm(tape, k, k_scale)?;
        Ok((q, k))
    }

    /// Mean next-token cross-entropy (nats) of `[.., vocab]` logits.
    pub fn loss(&self, tape: &mut Tape<T>, logits: Var, targets: &[u32]) -> Result<Var, ModelError> {
        Ok(tape.cross_entropy(logits, targets)?)
    }

    /// Inference-only logits for one sequence, flattened `[seq * vocab]`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.record_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, 1, tokens.len(), Mode::Eval)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }
}
