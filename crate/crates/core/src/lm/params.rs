// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{Arch, LmConfig};
use super::layers::{Attention, Mlp};
use super::moe::MoeLayer;
use crate::linalg::Matrix;
use crate::math::sqrt;
use crate::rng::{self, DetRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Ffn {
    Dense(Mlp),
    Moe(MoeLayer),
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub attn: Attention,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ffn: Ffn,
}

/// All trainable weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// `d_model x vocab`
    pub unembed: Matrix,
}

impl LmParams {
    /// All-zero weights (unit layer-norm gains stay zero too; this is the
    /// gradient accumulator shape).
    pub fn zeros(config: &LmConfig) -> Self {
        let d = config.d_model;
        let block = || Block {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            attn: Attention::zeros(d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            ffn: match config.arch {
                Arch::Dense => Ffn::Dense(Mlp::zeros(d, config.d_ff)),
                Arch::Moe => Ffn::Moe(MoeLayer::zeros(d, config.moe.n_experts, config.expert_width())),
            },
        };
        Self {
            config: *config,
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.context_length, d),
            blocks: (0..config.n_layers).map(|_| block()).collect(),
            lnf_gain: Matrix::zeros(1, d),
            lnf_bias: Matrix::zeros(1, d),
            unembed: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Gaussian init with std `init_std`; residual output projections are
    /// scaled by `1/sqrt(2 n_layers)`; layer-norm gains start at one.
    pub fn init(config: &LmConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let std = config.init_std;
        let resid_std = std / sqrt(2.0 * config.n_layers as f64);
        let mut fill = |m: &mut Matrix, s: f64| {
            m.data_mut().iter_mut().for_each(|v| *v = s * rng::normal(rng));
        };
        fill(&mut p.tok_emb, std);
        fill(&mut p.pos_emb, std);
        for b in &mut p.blocks {
            b.ln1_gain.fill(1.0);
            b.ln2_gain.fill(1.0);
            fill(&mut b.attn.wq, std);
            fill(&mut b.attn.wk, std);
            fill(&mut b.attn.wv, std);
            fill(&mut b.attn.wo, resid_std);
            match &mut b.ffn {
                Ffn::Dense(m) => {
                    fill(&mut m.w1, std);
                    fill(&mut m.w2, resid_std);
                }
                Ffn::Moe(layer) => {
                    fill(&mut layer.router, std);
                    for m in &mut layer.experts {
                        fill(&mut m.w1, std);
                        fill(&mut m.w2, resid_std);
                    }
                }
            }
        }
        p.lnf_gain.fill(1.0);
        fill(&mut p.unembed, std);
        Ok(p)
    }

    /// Matrices in checkpoint order with stable names.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln1.gain"), &b.ln1_gain));
            out.push((format!("blocks.{l}.ln1.bias"), &b.ln1_bias));
            for (n, m) in ["wq", "wk", "wv", "wo"].iter().zip(b.attn.matrices()) {
                out.push((format!("blocks.{l}.attn.{n}"), m));
            }
            out.push((format!("blocks.{l}.ln2.gain"), &b.ln2_gain));
            out.push((format!("blocks.{l}.ln2.bias"), &b.ln2_bias));
            match &b.ffn {
                Ffn::Dense(mlp) => {
                    for (n, m) in MLP_NAMES.iter().zip(mlp.matrices()) {
                        out.push((format!("blocks.{l}.mlp.{n}"), m));
                    }
                }
                Ffn::Moe(layer) => {
                    out.push((format!("blocks.{l}.router"), &layer.router));
                    for (e, mlp) in layer.experts.iter().enumerate() {
                        for (n, m) in MLP_NAMES.iter().zip(mlp.matrices()) {
                            out.push((format!("blocks.{l}.experts.{e}.{n}"), m));
                        }
                    }
                }
            }
        }
        out.push(("ln_f.gain".into(), &self.lnf_gain));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    /// Same order as [`named_matrices`](Self::named_matrices).
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_emb);
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.extend(b.attn.matrices_mut());
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            match &mut b.ffn {
                Ffn::Dense(mlp) => out.extend(mlp.matrices_mut()),
                Ffn::Moe(layer) => {
                    out.push(&mut layer.router);
                    for mlp in &mut layer.experts {
                        out.extend(mlp.matrices_mut());
                    }
                }
            }
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.unembed);
        out
    }

    /// Rebuilds parameters from matrices in checkpoint order.
    pub fn from_matrices(config: &LmConfig, mats: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let slots = p.matrices_mut();
        if slots.len() != mats.len() {
            return Err(Error::Config(format!(
                "expected {} matrices for this config, found {}",
                slots.len(),
                mats.len()
            )));
        }
        for (slot, m) in slots.into_iter().zip(mats) {
            if slot.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "from_matrices",
                    lhs: slot.shape(),
                    rhs: m.shape(),
                });
            }
            if !m.is_finite() {
                return Err(Error::Degenerate("non-finite checkpoint weight".into()));
            }
            *slot = m;
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.named_matrices().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_matrices().iter().all(|(_, m)| m.is_finite())
    }

    /// Global L2 norm over all entries.
    pub fn global_norm(&self) -> f64 {
        sqrt(self.named_matrices().iter().map(|(_, m)| m.sum_squares()).sum())
    }
}

const MLP_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
