// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::config::{Arch, LmConfig};
use super::model::{loss_and_grad, LmLoss};
use super::params::LmParams;
use super::tokenizer::BOS;
use crate::linalg::{AdamConfig, AdamState};
use crate::rng;
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_seqs: usize,
    pub adam: AdamConfig,
    /// Linear warmup length in steps; constant learning rate afterwards.
    pub warmup_steps: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_seqs: 8,
            adam: AdamConfig::default(),
            warmup_steps: 100,
            grad_clip: Some(1.0),
            log_interval: 20,
        }
    }
}

/// Non-overlapping token windows. Window `i` is fed as `[BOS] + w[..L-1]`
/// and trained to predict `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    seq_len: usize,
    tokens: Vec<u32>,
}

impl Windows {
    /// Cuts every stream into `seq_len` windows, dropping each remainder.
    pub fn from_streams<S: AsRef<[u32]>>(streams: &[S], seq_len: usize) -> Self {
        assert!(seq_len >= 1);
        let mut tokens = Vec::new();
        for s in streams {
            let s = s.as_ref();
            let n = s.len() / seq_len;
            tokens.extend_from_slice(&s[..n * seq_len]);
        }
        Self { seq_len, tokens }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn window(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Model input for window `i`.
    pub fn input(&self, i: usize) -> Vec<u32> {
        let w = self.window(i);
        let mut v = Vec::with_capacity(self.seq_len);
        v.push(BOS);
        v.extend_from_slice(&w[..self.seq_len - 1]);
        v
    }

    /// Stacked inputs and targets for a list of windows.
    pub fn batch(&self, idx: &[usize]) -> (Vec<u32>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(idx.len() * self.seq_len);
        let mut targets = Vec::with_capacity(idx.len() * self.seq_len);
        for &i in idx {
            inputs.extend(self.input(i));
            targets.extend_from_slice(self.window(i));
        }
        (inputs, targets)
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// Training provenance stored with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: u64,
    pub epochs: usize,
    pub initial_loss: f64,
    /// Mean cross-entropy over the last logging interval.
    pub final_loss: f64,
    pub epoch_mean_ce: Vec<f64>,
    /// `[layer][expert]` top-k assignment counts over the final epoch (MoE only).
    pub expert_usage: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmCheckpoint {
    pub params: LmParams,
    pub meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LmEvent {
    Log {
        step: u64,
        epoch: usize,
        lr: f64,
        ce: f64,
        load_balance: f64,
        total: f64,
    },
    Epoch {
        epoch: usize,
        mean_ce: f64,
    },
}

fn warmup_lr(cfg: &LmTrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.adam.lr
    } else {
        cfg.adam.lr * (step + 1) as f64 / cfg.warmup_steps as f64
    }
}

/// Trains from scratch for `tcfg.epochs` passes over `data`. Fully
/// determined by `(config, tcfg, data, seed)`.
pub fn train_lm(
    config: &LmConfig,
    tcfg: &LmTrainConfig,
    data: &Windows,
    seed: u64,
    mut sink: impl FnMut(&LmEvent),
) -> Result<LmCheckpoint> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("no training windows".into()));
    }
    if data.seq_len() > config.context_length {
        return Err(Error::Config(format!(
            "window length {} exceeds context length {}",
            data.seq_len(),
            config.context_length
        )));
    }
    if let Some(&t) = data.tokens().iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Config(format!(
            "corpus token {t} outside model vocabulary of {}",
            config.vocab_size
        )));
    }
    if tcfg.batch_seqs == 0 || tcfg.epochs == 0 {
        return Err(Error::Config("batch_seqs and epochs must be positive".into()));
    }

    let mut params = LmParams::init(config, &mut rng::stream(seed, INIT_STREAM))?;
    let mut states: Vec<AdamState> = params.matrices_mut().iter().map(|m| AdamState::new(m)).collect();
    let n_moe = if config.arch == Arch::Moe { config.n_layers } else { 0 };
    let mut meta = TrainMeta {
        seed,
        epochs: tcfg.epochs,
        initial_loss: f64::NAN,
        ..TrainMeta::default()
    };

    let mut step: u64 = 0;
    let mut window = LossWindow::default();
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(&mut rng::stream(seed, SHUFFLE_STREAM + epoch as u64), &mut order);
        let mut usage = vec![vec![0u64; config.moe.n_experts]; n_moe];
        let mut epoch_ce = 0.0;
        let mut epoch_batches = 0usize;
        for idx in order.chunks(tcfg.batch_seqs) {
            let (inputs, targets) = data.batch(idx);
            let lr = warmup_lr(tcfg, step);
            let (loss, mut grad, routings) = loss_and_grad(&params, &inputs, &targets, data.seq_len())?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss {}", loss.total),
                    step,
                    lr,
                });
            }
            if step == 0 {
                meta.initial_loss = loss.ce;
            }
            if let Some(clip) = tcfg.grad_clip {
                let norm = grad.global_norm();
                if norm > clip {
                    let s = clip / norm;
                    grad.matrices_mut().into_iter().for_each(|m| m.scale(s));
                }
            }
            for ((p, g), st) in params
                .matrices_mut()
                .into_iter()
                .zip(grad.matrices_mut())
                .zip(states.iter_mut())
            {
                st.step(&tcfg.adam, lr, p, g)?;
            }
            if !params.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameters after update".into(),
                    step,
                    lr,
                });
            }
            for (l, r) in routings.iter().enumerate() {
                for &e in &r.experts {
                    usage[l][e] += 1;
                }
            }
            epoch_ce += loss.ce;
            epoch_batches += 1;
            window.push(&loss);
            step += 1;
            if step.is_multiple_of(tcfg.log_interval.max(1)) {
                let m = window.take();
                meta.final_loss = m.ce;
                sink(&LmEvent::Log {
                    step,
                    epoch,
                    lr,
                    ce: m.ce,
                    load_balance: m.load_balance,
                    total: m.total,
                });
            }
        }
        let mean_ce = epoch_ce / epoch_batches as f64;
        meta.epoch_mean_ce.push(mean_ce);
        sink(&LmEvent::Epoch { epoch, mean_ce });
        if epoch + 1 == tcfg.epochs {
            meta.expert_usage = usage;
        }
    }
    if window.count > 0 {
        let m = window.take();
        meta.final_loss = m.ce;
    }
    meta.steps = step;
    Ok(LmCheckpoint { params, meta })
}

#[derive(Default)]
struct LossWindow {
    sum: LmLoss,
    count: usize,
}

impl LossWindow {
    fn push(&mut self, l: &LmLoss) {
        self.sum.ce += l.ce;
        self.sum.load_balance += l.load_balance;
        self.sum.total += l.total;
        self.count += 1;
    }

    fn take(&mut self) -> LmLoss {
        let n = self.count.max(1) as f64;
        let out = LmLoss {
            ce: self.sum.ce / n,
            load_balance: self.sum.load_balance / n,
            total: self.sum.total / n,
        };
        *self = Self::default();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{MoeConfig, Tokenizer};

    fn tiny(arch: Arch) -> LmConfig {
        LmConfig {
            arch,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_length: 16,
            moe: MoeConfig {
                n_experts: 4,
                top_k: 2,
                load_balance_alpha: 0.01,
            },
            ..LmConfig::default()
        }
    }

    fn corpus() -> Windows {
        let text = b"the cat sat on the mat. the dog sat on the log. ".repeat(40);
        Windows::from_streams(&[Tokenizer.encode(&text)], 16)
    }

    #[test]
    fn windows_layout() {
        let w = Windows::from_streams(&[alloc::vec![1u32, 2, 3, 4, 5], alloc::vec![6, 7, 8]], 2);
        assert_eq!(w.len(), 3);
        assert_eq!(w.window(2), [6, 7]);
        assert_eq!(w.input(0), [BOS, 1]);
        let (i, t) = w.batch(&[1, 2]);
        assert_eq!(i, [BOS, 3, BOS, 6]);
        assert_eq!(t, [3, 4, 6, 7]);
    }

    #[test]
    fn loss_decreases_and_runs_are_bit_identical() {
        for arch in [Arch::Dense, Arch::Moe] {
            let tcfg = LmTrainConfig {
                epochs: 2,
                batch_seqs: 4,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                warmup_steps: 5,
                log_interval: 5,
                ..LmTrainConfig::default()
            };
            let mut events = 0;
            let a = train_lm(&tiny(arch), &tcfg, &corpus(), 7, |_| events += 1).unwrap();
            let b = train_lm(&tiny(arch), &tcfg, &corpus(), 7, |_| {}).unwrap();
            assert!(events > 0);
            assert_eq!(a, b);
            assert!(a.meta.final_loss < a.meta.initial_loss);
            assert_eq!(a.meta.epoch_mean_ce.len(), 2);
            if arch == Arch::Moe {
                assert_eq!(a.meta.expert_usage.len(), 2);
            }
        }
    }

    #[test]
    fn rejects_foreign_vocabulary() {
        let mut cfg = tiny(Arch::Dense);
        cfg.vocab_size = 100;
        let e = train_lm(&cfg, &LmTrainConfig::default(), &corpus(), 0, |_| {}).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
