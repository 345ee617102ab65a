// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crosscoders over two activation spaces: vanilla L1, fixed shared features
//! with tied decoders, and BatchTopK with separate shared/exclusive budgets.
//!
//! Features `i` in the designated set `S` own a single decoder row that both
//! models read; the tie is structural, there is no second copy to drift.

mod forward;
mod loss;
mod params;
mod train;

pub use forward::{activations, decode, encode, relu, selection_weights, sparsify_batch_topk, sparsify_threshold, TopkSelection};
pub use loss::{loss_and_grad, loss_l1, loss_shared, Gate, Penalty, XcLoss};
pub use params::{CrosscoderParams, Model, Thresholds, Variant};
pub use train::{budgets, fve, train_crosscoder, variance_explained, XcMetrics, XcTrainConfig};
