// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::math::norm;
use crate::rng::{self, DetRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    L1,
    SharedL1,
    BatchTopk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    A,
    B,
}

/// Inference-time score thresholds for BatchTopK, one per feature set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub shared: f64,
    pub exclusive: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Slot {
    Shared(usize),
    Exclusive(usize),
}

/// Crosscoder weights.
///
/// Logical shapes: `W_enc^m` is `d_m x k`, `b_enc` is `1 x k`. Decoder rows
/// are split by set: `w_dec_shared` holds one row per designated shared
/// feature (requires `d_a == d_b`); `w_dec_a` / `w_dec_b` hold the
/// exclusive rows in increasing feature order.
#[derive(Clone, Debug, PartialEq)]
pub struct CrosscoderParams {
    pub variant: Variant,
    d_a: usize,
    d_b: usize,
    shared: Vec<usize>,
    slots: Vec<Slot>,
    pub w_enc_a: Matrix,
    pub w_enc_b: Matrix,
    pub b_enc: Matrix,
    pub w_dec_shared: Matrix,
    pub w_dec_a: Matrix,
    pub w_dec_b: Matrix,
    pub b_dec_a: Matrix,
    pub b_dec_b: Matrix,
    pub thresholds: Option<Thresholds>,
    pub steps_trained: u64,
}

impl CrosscoderParams {
    /// All-zero parameters; also the gradient container shape.
    pub fn zeros(variant: Variant, d_a: usize, d_b: usize, k: usize, shared: Vec<usize>) -> Result<Self> {
        if d_a == 0 || d_b == 0 || k == 0 {
            return Err(Error::Config("crosscoder dims and dictionary size must be positive".into()));
        }
        if shared.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("shared index list must be strictly increasing".into()));
        }
        if let Some(&last) = shared.last() {
            if last >= k {
                return Err(Error::Index {
                    what: "shared feature",
                    index: last,
                    len: k,
                });
            }
            if d_a != d_b {
                return Err(Error::Config(format!(
                    "tied shared decoders need equal dims, got {d_a} and {d_b}"
                )));
            }
        }
        let mut slots = Vec::with_capacity(k);
        let (mut s, mut e) = (0, 0);
        for i in 0..k {
            if shared.get(s) == Some(&i) {
                slots.push(Slot::Shared(s));
                s += 1;
            } else {
                slots.push(Slot::Exclusive(e));
                e += 1;
            }
        }
        let n_s = shared.len();
        Ok(Self {
            variant,
            d_a,
            d_b,
            slots,
            w_enc_a: Matrix::zeros(d_a, k),
            w_enc_b: Matrix::zeros(d_b, k),
            b_enc: Matrix::zeros(1, k),
            w_dec_shared: Matrix::zeros(n_s, d_a),
            w_dec_a: Matrix::zeros(k - n_s, d_a),
            w_dec_b: Matrix::zeros(k - n_s, d_b),
            b_dec_a: Matrix::zeros(1, d_a),
            b_dec_b: Matrix::zeros(1, d_b),
            shared,
            thresholds: None,
            steps_trained: 0,
        })
    }

    /// Decoder rows uniform on the sphere times `scale` (independently per
    /// model for exclusive features), encoder set to the decoder transpose,
    /// biases zero.
    pub fn init(
        variant: Variant,
        d_a: usize,
        d_b: usize,
        k: usize,
        shared: Vec<usize>,
        scale: f64,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let mut p = Self::zeros(variant, d_a, d_b, k, shared)?;
        for i in 0..k {
            match p.slots[i] {
                Slot::Shared(r) => {
                    let u = rng::unit_vector(rng, d_a);
                    for (o, v) in p.w_dec_shared.row_mut(r).iter_mut().zip(&u) {
                        *o = scale * v;
                    }
                }
                Slot::Exclusive(r) => {
                    let ua = rng::unit_vector(rng, d_a);
                    let ub = rng::unit_vector(rng, d_b);
                    for (o, v) in p.w_dec_a.row_mut(r).iter_mut().zip(&ua) {
                        *o = scale * v;
                    }
                    for (o, v) in p.w_dec_b.row_mut(r).iter_mut().zip(&ub) {
                        *o = scale * v;
                    }
                }
            }
        }
        for i in 0..k {
            for j in 0..d_a {
                let v = p.decoder_row(Model::A, i)[j];
                p.w_enc_a.set(j, i, v);
            }
            for j in 0..d_b {
                let v = p.decoder_row(Model::B, i)[j];
                p.w_enc_b.set(j, i, v);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.variant, self.d_a, self.d_b, self.n_features(), self.shared.clone())
            .expect("shape already validated")
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn d_b(&self) -> usize {
        self.d_b
    }

    pub fn d(&self, m: Model) -> usize {
        match m {
            Model::A => self.d_a,
            Model::B => self.d_b,
        }
    }

    pub fn n_features(&self) -> usize {
        self.slots.len()
    }

    pub fn shared_indices(&self) -> &[usize] {
        &self.shared
    }

    pub fn exclusive_indices(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&i| !self.is_shared(i)).collect()
    }

    pub fn is_shared(&self, i: usize) -> bool {
        matches!(self.slots[i], Slot::Shared(_))
    }

    pub(crate) fn slot(&self, i: usize) -> Slot {
        self.slots[i]
    }

    /// The decoder row model `m` uses for feature `i`. For shared features
    /// both models get the same storage.
    pub fn decoder_row(&self, m: Model, i: usize) -> &[f64] {
        match (self.slots[i], m) {
            (Slot::Shared(r), _) => self.w_dec_shared.row(r),
            (Slot::Exclusive(r), Model::A) => self.w_dec_a.row(r),
            (Slot::Exclusive(r), Model::B) => self.w_dec_b.row(r),
        }
    }

    pub fn decoder_norms(&self, m: Model) -> Vec<f64> {
        (0..self.n_features()).map(|i| norm(self.decoder_row(m, i))).collect()
    }

    pub fn is_trained(&self) -> bool {
        self.steps_trained > 0
    }

    /// The same crosscoder with the two models' roles exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        s.d_a = self.d_b;
        s.d_b = self.d_a;
        core::mem::swap(&mut s.w_enc_a, &mut s.w_enc_b);
        core::mem::swap(&mut s.w_dec_a, &mut s.w_dec_b);
        core::mem::swap(&mut s.b_dec_a, &mut s.b_dec_b);
        s
    }

    /// Matrices in checkpoint order.
    pub fn matrices(&self) -> [&Matrix; 8] {
        [
            &self.w_enc_a,
            &self.w_enc_b,
            &self.b_enc,
            &self.w_dec_shared,
            &self.w_dec_a,
            &self.w_dec_b,
            &self.b_dec_a,
            &self.b_dec_b,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_enc_a,
            &mut self.w_enc_b,
            &mut self.b_enc,
            &mut self.w_dec_shared,
            &mut self.w_dec_a,
            &mut self.w_dec_b,
            &mut self.b_dec_a,
            &mut self.b_dec_b,
        ]
    }

    pub const MATRIX_NAMES: [&'static str; 8] = [
        "w_enc_a",
        "w_enc_b",
        "b_enc",
        "w_dec_shared",
        "w_dec_a",
        "w_dec_b",
        "b_dec_a",
        "b_dec_b",
    ];

    /// Rebuilds parameters from checkpoint-ordered matrices.
    pub fn from_matrices(
        variant: Variant,
        d_a: usize,
        d_b: usize,
        k: usize,
        shared: Vec<usize>,
        mats: Vec<Matrix>,
    ) -> Result<Self> {
        let mut p = Self::zeros(variant, d_a, d_b, k, shared)?;
        if mats.len() != 8 {
            return Err(Error::Config(format!("expected 8 crosscoder matrices, found {}", mats.len())));
        }
        for (slot, m) in p.matrices_mut().into_iter().zip(mats) {
            if slot.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "crosscoder from_matrices",
                    lhs: slot.shape(),
                    rhs: m.shape(),
                });
            }
            *slot = m;
        }
        if !p.is_finite() {
            return Err(Error::Degenerate("non-finite crosscoder weight".into()));
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}
