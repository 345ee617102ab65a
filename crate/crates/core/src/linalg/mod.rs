// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` linear algebra and the Adam optimizer.
//!
//! Products go through [`gemm`], a thin strided wrapper over the
//! `matrixmultiply` kernel. For a fixed shape the kernel accumulates each
//! output element in a fixed order, and row-parallel splitting (feature
//! `parallel`) never changes that order, so results are bit-reproducible.

mod adam;
mod gemm;
mod loss;
mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use gemm::{gemm, set_parallel_rows, MatRef};
pub use loss::{cross_entropy, log_softmax_row, softmax_in_place, softmax_rows, CrossEntropy};
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
