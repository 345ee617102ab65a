// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerRange { layer: usize, n_layers: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite {what} at step {step} (lr {lr:e})")]
    NonFinite { what: String, step: u64, lr: f64 },
    #[error("activation sets are not paired: {0}")]
    Pairing(String),
    #[error("input out of range: {0}")]
    Input(String),
}

pub type Result<T> = core::result::Result<T, Error>;
