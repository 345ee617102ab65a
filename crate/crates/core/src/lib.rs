// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerical core for comparing a dense transformer with a Mixture-of-Experts
//! transformer through a crosscoder.
//!
//! Everything here is pure computation over in-memory buffers: dense linear
//! algebra and Adam, a byte-level decoder-only transformer with optional
//! top-k routed experts, the crosscoder family (L1, fixed shared features,
//! BatchTopK), the diffing statistics, and a planted-dictionary oracle.
//! File formats, capture and the CLI live in the `xcdiff` crate.
//!
//! The crate is `no_std` with `alloc`. The `std` feature only enables runtime
//! CPU feature detection inside the gemm kernel; `parallel` splits large
//! products over output rows without changing any reduction order.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod activations;
pub mod analysis;
pub mod crosscoder;
mod error;
pub mod linalg;
pub mod lm;
pub mod math;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::{AdamConfig, AdamState, Matrix};
