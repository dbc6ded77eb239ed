//! Architecture hyperparameters, the published presets, and parameter counting.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Vocabulary size after padding the GPT-NeoX-20B tokenizer.
pub const PADDED_VOCAB: usize = 50_304;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub context_length: usize,
    pub rope_base: f64,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "yes")]
    pub qk_norm_enabled: bool,
    #[serde(default = "yes")]
    pub biases_enabled: bool,
    #[serde(default = "yes")]
    pub tied_embeddings: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_vocab() -> usize {
    PADDED_VOCAB
}
fn default_dropout() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-5
}
fn yes() -> bool {
    true
}

/// Parameter totals split the way the published table reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub non_embedding: u64,
    pub embedding: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.non_embedding + self.embedding
    }
}

impl ModelConfig {
    fn preset(layers: usize, hidden: usize, heads: usize, ffn_hidden: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn_hidden,
            vocab: PADDED_VOCAB,
            context_length: 4096,
            rope_base: 10_000.0,
            dropout_p: 0.1,
            qk_norm_enabled: true,
            biases_enabled: true,
            tied_embeddings: true,
            norm_eps: 1e-5,
        }
    }

    /// Looks up one of the reference scales (`0.13B`, `0.4B`, `1.3B`, `1.7B`)
    /// or the small `toy` / `toy-2m` configs used for local runs.
    pub fn named(name: &str) -> Option<Self> {
        Some(match name {
            "0.13B" => Self::preset(22, 512, 8, 2256),
            "0.4B" => Self::preset(22, 1024, 16, 3840),
            "1.3B" => Self::preset(24, 2048, 32, 5440),
            "1.7B" => Self::preset(24, 2048, 32, 8192),
            "toy" => Self {
                vocab: 256,
                context_length: 64,
                dropout_p: 0.0,
                ..Self::preset(2, 32, 4, 96)
            },
            "toy-2m" => Self {
                vocab: 256,
                context_length: 128,
                ..Self::preset(4, 192, 4, 512)
            },
            _ => return None,
        })
    }

    pub const PRESET_NAMES: [&'static str; 4] = ["0.13B", "0.4B", "1.3B", "1.7B"];

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return fail("layers, hidden, heads and ffn_hidden must be positive".into());
        }
        if self.vocab == 0 || self.vocab > u32::MAX as usize {
            return fail(format!("vocab {} out of range", self.vocab));
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.context_length == 0 {
            return fail("context_length must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return fail(format!("rope_base {} must be > 1", self.rope_base));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps {} must be > 0", self.norm_eps));
        }
        Ok(())
    }

    /// Ordered `(name, shape)` list of every trainable tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, hd) = (self.hidden, self.ffn_hidden, self.head_dim());
        let mut out = vec![("embedding".to_string(), vec![self.vocab, h])];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("attn_norm.scale"), vec![h]));
            out.push((p("attn.qkv.weight"), vec![h, 3 * h]));
            if self.biases_enabled {
                out.push((p("attn.qkv.bias"), vec![3 * h]));
            }
            if self.qk_norm_enabled {
                out.push((p("attn.q_norm.scale"), vec![hd]));
                out.push((p("attn.k_norm.scale"), vec![hd]));
            }
            out.push((p("attn.out.weight"), vec![h, h]));
            if self.biases_enabled {
                out.push((p("attn.out.bias"), vec![h]));
            }
            out.push((p("ffn_norm.scale"), vec![h]));
            for name in ["gate", "up"] {
                out.push((p(&format!("ffn.{name}.weight")), vec![h, f]));
                if self.biases_enabled {
                    out.push((p(&format!("ffn.{name}.bias")), vec![f]));
                }
            }
            out.push((p("ffn.down.weight"), vec![f, h]));
            if self.biases_enabled {
                out.push((p("ffn.down.bias"), vec![h]));
            }
        }
        out.push(("final_norm.scale".to_string(), vec![h]));
        if !self.tied_embeddings {
            out.push(("lm_head".to_string(), vec![self.vocab, h]));
        }
        out
    }
}

/// Exact trainable-parameter count. A tied output head is counted once, as
/// part of the embedding; an untied head is counted as embedding as well.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let (h, f, v) = (config.hidden as u64, config.ffn_hidden as u64, config.vocab as u64);
    let hd = config.head_dim() as u64;
    let mut per_layer = 4 * h * h + 3 * h * f + 2 * h;
    if config.biases_enabled {
        per_layer += 3 * h + h + 2 * f + h;
    }
    if config.qk_norm_enabled {
        per_layer += 2 * hd;
    }
    let heads = if config.tied_embeddings { 1 } else { 2 };
    ParamCount {
        non_embedding: config.layers as u64 * per_layer + h,
        embedding: heads * v * h,
    }
}

/// RoPE base used for a given training context length. 4096 also has a
/// documented alternative of 100,000, reachable through `override_base`.
pub fn rope_base_for_context(context_length: usize, override_base: Option<f64>) -> Result<f64, ModelError> {
    if let Some(base) = override_base {
        if base > 1.0 && base.is_finite() {
            return Ok(base);
        }
        return Err(ModelError::Config(format!("rope base override {base} must be > 1")));
    }
    match context_length {
        2048 | 4096 => Ok(10_000.0),
        8192 => Ok(500_000.0),
        16384 => Ok(1_000_000.0),
        other => Err(ModelError::Config(format!(
            "no RoPE base known for context length {other}; pass an explicit override"
        ))),
    }
}

/// Alternative base listed for the 4096-token context.
pub const ROPE_BASE_4096_ALT: f64 = 100_000.0;
