// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level decoder-only transformer with an optional Mixture-of-Experts
//! feed-forward block, hand-written backward pass and a deterministic trainer.

mod config;
mod layers;
mod model;
mod moe;
mod params;
mod tokenizer;
mod train;

pub use config::{Arch, LmConfig, MoeConfig};
pub use layers::{layer_norm, Attention, Mlp, LN_EPS};
pub use model::{forward, loss_and_grad, ForwardOutput, LmLoss};
pub use moe::{load_balance_loss, route_topk, MoeLayer, MoeOutput, Routing};
pub use params::{Block, Ffn, LmParams};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, VOCAB_SIZE};
pub use train::{train_lm, LmCheckpoint, LmEvent, LmTrainConfig, TrainMeta, Windows};
