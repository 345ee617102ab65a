// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;
use core::cmp::Ordering;

use super::params::{CrosscoderParams, Model, Slot, Thresholds, Variant};
use crate::linalg::{gemm, Matrix};
use crate::math::norm;
use crate::{Error, Result};

/// Pre-activations `p = x_A W_enc^A + x_B W_enc^B + b_enc`.
pub fn encode(params: &CrosscoderParams, x_a: &Matrix, x_b: &Matrix) -> Result<Matrix> {
    if x_a.cols() != params.d_a() || x_b.cols() != params.d_b() || x_a.rows() != x_b.rows() {
        return Err(Error::Shape {
            op: "crosscoder encode",
            lhs: x_a.shape(),
            rhs: x_b.shape(),
        });
    }
    let k = params.n_features();
    let mut p = Matrix::zeros(x_a.rows(), k);
    p.add_row_broadcast(params.b_enc.data());
    gemm(x_a.view(), params.w_enc_a.view(), 1.0, p.data_mut(), k);
    gemm(x_b.view(), params.w_enc_b.view(), 1.0, p.data_mut(), k);
    Ok(p)
}

pub fn relu(p: &Matrix) -> Matrix {
    let mut f = p.clone();
    for v in f.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    f
}

/// Per-feature selection weight `‖W^A_dec,i‖ + ‖W^B_dec,i‖`.
pub fn selection_weights(params: &CrosscoderParams) -> Vec<f64> {
    (0..params.n_features())
        .map(|i| match params.slot(i) {
            Slot::Shared(_) => 2.0 * norm(params.decoder_row(Model::A, i)),
            Slot::Exclusive(_) => norm(params.decoder_row(Model::A, i)) + norm(params.decoder_row(Model::B, i)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopkSelection {
    pub f: Matrix,
    /// Smallest kept score in the shared set, if anything was kept.
    pub min_shared: Option<f64>,
    pub min_exclusive: Option<f64>,
}

/// Batch-level TopK run independently over the shared and exclusive sets.
/// Only positive pre-activations compete; ties go to the lower
/// (token, feature) pair. Budgets larger than the candidate count keep
/// every candidate.
pub fn sparsify_batch_topk(
    p: &Matrix,
    params: &CrosscoderParams,
    budget_shared: usize,
    budget_exclusive: usize,
) -> Result<TopkSelection> {
    let k = params.n_features();
    if p.cols() != k {
        return Err(Error::Shape {
            op: "sparsify_batch_topk",
            lhs: p.shape(),
            rhs: (p.rows(), k),
        });
    }
    let w = selection_weights(params);
    let mut f = Matrix::zeros(p.rows(), k);
    let mut mins = [None, None];
    for (set, budget) in [(true, budget_shared), (false, budget_exclusive)] {
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for b in 0..p.rows() {
            let row = p.row(b);
            for i in 0..k {
                if params.is_shared(i) == set && row[i] > 0.0 {
                    cand.push((row[i] * w[i], b * k + i));
                }
            }
        }
        if budget == 0 || cand.is_empty() {
            continue;
        }
        let by_rank = |x: &(f64, usize), y: &(f64, usize)| -> Ordering { y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)) };
        if cand.len() > budget {
            cand.select_nth_unstable_by(budget - 1, by_rank);
            cand.truncate(budget);
        }
        let mut min = f64::INFINITY;
        for &(s, flat) in &cand {
            f.data_mut()[flat] = p.data()[flat];
            min = min.min(s);
        }
        mins[usize::from(!set)] = Some(min);
    }
    Ok(TopkSelection {
        f,
        min_shared: mins[0],
        min_exclusive: mins[1],
    })
}

/// Inference-time BatchTopK: keep positive entries whose score exceeds the
/// threshold of their set.
pub fn sparsify_threshold(p: &Matrix, params: &CrosscoderParams, th: Thresholds) -> Matrix {
    let w = selection_weights(params);
    let k = params.n_features();
    let mut f = Matrix::zeros(p.rows(), k);
    for b in 0..p.rows() {
        let (src, dst) = (p.row(b), f.row_mut(b));
        for i in 0..k {
            let t = if params.is_shared(i) { th.shared } else { th.exclusive };
            if src[i] > 0.0 && src[i] * w[i] > t {
                dst[i] = src[i];
            }
        }
    }
    f
}

/// Inference-time feature activations.
pub fn activations(params: &CrosscoderParams, x_a: &Matrix, x_b: &Matrix) -> Result<Matrix> {
    let p = encode(params, x_a, x_b)?;
    match params.variant {
        Variant::L1 | Variant::SharedL1 => Ok(relu(&p)),
        Variant::BatchTopk => {
            let th = params
                .thresholds
                .ok_or_else(|| Error::Config("BatchTopK crosscoder has no inference thresholds (untrained)".into()))?;
            Ok(sparsify_threshold(&p, params, th))
        }
    }
}

/// Reconstructions `x̂_m = f W_dec^m + b_dec^m`, skipping zero activations.
pub fn decode(params: &CrosscoderParams, f: &Matrix) -> Result<(Matrix, Matrix)> {
    let k = params.n_features();
    if f.cols() != k {
        return Err(Error::Shape {
            op: "crosscoder decode",
            lhs: f.shape(),
            rhs: (f.rows(), k),
        });
    }
    let mut xa = Matrix::zeros(f.rows(), params.d_a());
    let mut xb = Matrix::zeros(f.rows(), params.d_b());
    xa.add_row_broadcast(params.b_dec_a.data());
    xb.add_row_broadcast(params.b_dec_b.data());
    for b in 0..f.rows() {
        for (i, &v) in f.row(b).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, w) in xa.row_mut(b).iter_mut().zip(params.decoder_row(Model::A, i)) {
                *o += v * w;
            }
            for (o, w) in xb.row_mut(b).iter_mut().zip(params.decoder_row(Model::B, i)) {
                *o += v * w;
            }
        }
    }
    Ok((xa, xb))
}
