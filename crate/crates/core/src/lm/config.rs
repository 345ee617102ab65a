// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB_SIZE;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dense,
    Moe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub load_balance_alpha: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            top_k: 2,
            load_balance_alpha: 0.01,
        }
    }
}

/// Transformer shape. For `Arch::Moe` each expert is `d_ff / top_k` wide so
/// the per-token active MLP width equals the dense model's `d_ff`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub moe: MoeConfig,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Dense,
            n_layers: 5,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            context_length: 256,
            moe: MoeConfig::default(),
            init_std: 0.02,
        }
    }
}

impl LmConfig {
    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn expert_width(&self) -> usize {
        self.d_ff / self.moe.top_k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.context_length == 0 {
            return bad("d_ff, vocab_size and context_length must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and >= 0".into());
        }
        if self.arch == Arch::Moe {
            let m = &self.moe;
            if m.top_k == 0 || m.top_k > m.n_experts {
                return bad(format!(
                    "top_k {} must lie in 1..={}",
                    m.top_k, m.n_experts
                ));
            }
            if !(m.load_balance_alpha >= 0.0 && m.load_balance_alpha.is_finite()) {
                return bad("load_balance_alpha must be finite and >= 0".into());
            }
            if !self.d_ff.is_multiple_of(m.top_k) {
                return bad(format!(
                    "d_ff {} must be divisible by top_k {} to match active parameters",
                    self.d_ff, m.top_k
                ));
            }
        }
        Ok(())
    }

    /// Parameters touched per token: attention, norms, embeddings and, for
    /// MoE, the router plus `top_k` experts.
    pub fn active_parameters(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * d + 4 * d;
        let ffn = match self.arch {
            Arch::Dense => 2 * d * self.d_ff + self.d_ff + d,
            Arch::Moe => {
                let w = self.expert_width();
                d * self.moe.n_experts + self.moe.top_k * (2 * d * w + w + d)
            }
        };
        let per_layer = attn + ffn;
        self.n_layers * per_layer
            + self.vocab_size * d
            + self.context_length * d
            + 2 * d
            + d * self.vocab_size
    }
}
