// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;

use super::forward::{decode, encode, relu, sparsify_batch_topk, TopkSelection};
use super::params::{CrosscoderParams, Model, Slot};
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Sparsity coefficients. A tied row is charged `shared * f_i * ‖W_i‖`
/// (one norm); an exclusive row `exclusive * f_i * (‖W^A_i‖ + ‖W^B_i‖)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalty {
    pub shared: f64,
    pub exclusive: f64,
}

impl Penalty {
    /// The plain L1 objective, which charges both norms for every feature.
    pub fn l1(lambda: f64) -> Self {
        Self {
            shared: 2.0 * lambda,
            exclusive: lambda,
        }
    }

    pub fn split(lambda_shared: f64, lambda_exclusive: f64) -> Self {
        Self {
            shared: lambda_shared,
            exclusive: lambda_exclusive,
        }
    }

    pub fn none() -> Self {
        Self::split(0.0, 0.0)
    }
}

/// How pre-activations become feature activations.
#[derive(Clone, Copy, Debug)]
pub enum Gate<'a> {
    Relu,
    BatchTopk { shared: usize, exclusive: usize },
    /// Keep `max(p, 0)` exactly where the row-major mask is set.
    Mask(&'a [bool]),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XcLoss {
    pub rec_a: f64,
    pub rec_b: f64,
    pub sparsity: f64,
    pub total: f64,
    /// Mean nonzero activations per token.
    pub l0: f64,
}

/// Batch-mean loss and gradients; `selection.f` holds the activations used.
pub fn loss_and_grad(
    params: &CrosscoderParams,
    x_a: &Matrix,
    x_b: &Matrix,
    penalty: Penalty,
    gate: Gate<'_>,
) -> Result<(XcLoss, CrosscoderParams, TopkSelection)> {
    if penalty.shared < 0.0 || penalty.exclusive < 0.0 {
        return Err(Error::Config("sparsity coefficients must be non-negative".into()));
    }
    let p = encode(params, x_a, x_b)?;
    let sel = match gate {
        Gate::Relu => TopkSelection {
            f: relu(&p),
            min_shared: None,
            min_exclusive: None,
        },
        Gate::BatchTopk { shared, exclusive } => sparsify_batch_topk(&p, params, shared, exclusive)?,
        Gate::Mask(mask) => {
            if mask.len() != p.len() {
                return Err(Error::Shape {
                    op: "selection mask",
                    lhs: (mask.len(), 1),
                    rhs: p.shape(),
                });
            }
            let mut f = relu(&p);
            for (v, &keep) in f.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            TopkSelection {
                f,
                min_shared: None,
                min_exclusive: None,
            }
        }
    };
    let f = &sel.f;
    let (xh_a, xh_b) = decode(params, f)?;
    let r_a = xh_a.sub(x_a)?;
    let r_b = xh_b.sub(x_b)?;

    let n = x_a.rows();
    let inv = 1.0 / n as f64;
    let k = params.n_features();
    let na = params.decoder_norms(Model::A);
    let nb = params.decoder_norms(Model::B);
    let coef: vec::Vec<f64> = (0..k)
        .map(|i| match params.slot(i) {
            Slot::Shared(_) => penalty.shared * na[i],
            Slot::Exclusive(_) => penalty.exclusive * (na[i] + nb[i]),
        })
        .collect();

    let mut g = params.zeros_like();
    let mut fsum = vec![0.0; k];
    let mut sparsity = 0.0;
    let mut nnz = 0usize;
    let (d_a, d_b) = (params.d_a(), params.d_b());
    for b in 0..n {
        let (ra, rb) = (r_a.row(b), r_b.row(b));
        for (i, &v) in f.row(b).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            nnz += 1;
            sparsity += v * coef[i];
            fsum[i] += v;
            let wa = params.decoder_row(Model::A, i);
            let wb = params.decoder_row(Model::B, i);
            let mut df = coef[i];
            for j in 0..d_a {
                df += 2.0 * ra[j] * wa[j];
            }
            for j in 0..d_b {
                df += 2.0 * rb[j] * wb[j];
            }
            let dp = df * inv;
            let s = 2.0 * v * inv;
            match params.slot(i) {
                Slot::Shared(r) => {
                    for ((o, x), y) in g.w_dec_shared.row_mut(r).iter_mut().zip(ra).zip(rb) {
                        *o += s * (x + y);
                    }
                }
                Slot::Exclusive(r) => {
                    for (o, x) in g.w_dec_a.row_mut(r).iter_mut().zip(ra) {
                        *o += s * x;
                    }
                    for (o, x) in g.w_dec_b.row_mut(r).iter_mut().zip(rb) {
                        *o += s * x;
                    }
                }
            }
            let xa = x_a.row(b);
            let ga = g.w_enc_a.data_mut();
            for j in 0..d_a {
                ga[j * k + i] += xa[j] * dp;
            }
            let xb = x_b.row(b);
            let gb = g.w_enc_b.data_mut();
            for j in 0..d_b {
                gb[j * k + i] += xb[j] * dp;
            }
            g.b_enc.data_mut()[i] += dp;
        }
    }
    for i in 0..k {
        if fsum[i] == 0.0 {
            continue;
        }
        let m = fsum[i] * inv;
        match params.slot(i) {
            Slot::Shared(r) if na[i] > 0.0 => {
                let c = penalty.shared * m / na[i];
                for (o, w) in g.w_dec_shared.row_mut(r).iter_mut().zip(params.w_dec_shared.row(r)) {
                    *o += c * w;
                }
            }
            Slot::Shared(_) => {}
            Slot::Exclusive(r) => {
                if na[i] > 0.0 {
                    let c = penalty.exclusive * m / na[i];
                    for (o, w) in g.w_dec_a.row_mut(r).iter_mut().zip(params.w_dec_a.row(r)) {
                        *o += c * w;
                    }
                }
                if nb[i] > 0.0 {
                    let c = penalty.exclusive * m / nb[i];
                    for (o, w) in g.w_dec_b.row_mut(r).iter_mut().zip(params.w_dec_b.row(r)) {
                        *o += c * w;
                    }
                }
            }
        }
    }
    g.b_dec_a = r_a.col_sums();
    g.b_dec_a.scale(2.0 * inv);
    g.b_dec_b = r_b.col_sums();
    g.b_dec_b.scale(2.0 * inv);

    let rec_a = r_a.sum_squares() * inv;
    let rec_b = r_b.sum_squares() * inv;
    let sparsity = sparsity * inv;
    let loss = XcLoss {
        rec_a,
        rec_b,
        sparsity,
        total: rec_a + rec_b + sparsity,
        l0: nnz as f64 * inv,
    };
    Ok((loss, g, sel))
}

/// Vanilla L1 crosscoder objective.
pub fn loss_l1(
    params: &CrosscoderParams,
    x_a: &Matrix,
    x_b: &Matrix,
    lambda: f64,
) -> Result<(XcLoss, CrosscoderParams)> {
    let (l, g, _) = loss_and_grad(params, x_a, x_b, Penalty::l1(lambda), Gate::Relu)?;
    Ok((l, g))
}

/// Shared-feature objective: tied rows pay `lambda_shared` on their single
/// norm, exclusive rows pay `lambda_exclusive` on both.
pub fn loss_shared(
    params: &CrosscoderParams,
    x_a: &Matrix,
    x_b: &Matrix,
    lambda_shared: f64,
    lambda_exclusive: f64,
) -> Result<(XcLoss, CrosscoderParams)> {
    if params.shared_indices().is_empty() {
        return Err(Error::Config("shared-feature loss needs a nonempty shared set; use the L1 loss".into()));
    }
    let (l, g, _) = loss_and_grad(
        params,
        x_a,
        x_b,
        Penalty::split(lambda_shared, lambda_exclusive),
        Gate::Relu,
    )?;
    Ok((l, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::Variant;
    use crate::math::norm;
    use crate::rng;
    use alloc::vec::Vec;

    const D: usize = 8;
    const K: usize = 16;
    const B: usize = 4;

    fn random_setup(shared: Vec<usize>, seed: u64) -> (CrosscoderParams, Matrix, Matrix) {
        let mut r = rng::stream(seed, 0);
        let mut p = CrosscoderParams::init(Variant::SharedL1, D, D, K, shared, 0.5, &mut r).unwrap();
        for m in p.matrices_mut() {
            for v in m.data_mut() {
                *v += 0.3 * rng::normal(&mut r);
            }
        }
        let xa = Matrix::from_fn(B, D, |_, _| rng::normal(&mut r));
        let xb = Matrix::from_fn(B, D, |_, _| rng::normal(&mut r));
        (p, xa, xb)
    }

    fn loss_only(p: &CrosscoderParams, xa: &Matrix, xb: &Matrix, pen: Penalty, gate: Gate<'_>) -> f64 {
        loss_and_grad(p, xa, xb, pen, gate).unwrap().0.total
    }

    /// Central differences over every coordinate; returns the worst
    /// relative error and how many coordinates were compared.
    fn fd_check(p: &CrosscoderParams, xa: &Matrix, xb: &Matrix, pen: Penalty, gate: Gate<'_>) -> (f64, usize) {
        let h = 1e-5;
        let (_, g, _) = loss_and_grad(p, xa, xb, pen, gate).unwrap();
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (mi, gm) in g.matrices().iter().enumerate() {
            for idx in 0..gm.len() {
                let mut hi = p.clone();
                hi.matrices_mut()[mi].data_mut()[idx] += h;
                let mut lo = p.clone();
                lo.matrices_mut()[mi].data_mut()[idx] -= h;
                let fd = (loss_only(&hi, xa, xb, pen, gate) - loss_only(&lo, xa, xb, pen, gate)) / (2.0 * h);
                let an = gm.data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                count += 1;
            }
        }
        (worst, count)
    }

    fn away_from_kinks(p: &CrosscoderParams, xa: &Matrix, xb: &Matrix) -> bool {
        encode(p, xa, xb).unwrap().data().iter().all(|v| v.abs() > 1e-3)
    }

    fn setup_away_from_kinks(shared: Vec<usize>) -> (CrosscoderParams, Matrix, Matrix) {
        (0..)
            .map(|s| random_setup(shared.clone(), s))
            .find(|(p, a, b)| away_from_kinks(p, a, b))
            .unwrap()
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let (mut p, xa, xb) = setup_away_from_kinks(vec![]);
        p.variant = Variant::L1;
        let (worst, n) = fd_check(&p, &xa, &xb, Penalty::l1(0.3), Gate::Relu);
        assert!(n > 500);
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn shared_gradient_matches_finite_differences() {
        let (p, xa, xb) = setup_away_from_kinks(vec![0, 3, 5, 9]);
        let (worst, _) = fd_check(&p, &xa, &xb, Penalty::split(0.21, 0.3), Gate::Relu);
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn topk_gradient_matches_finite_differences_with_fixed_mask() {
        let (mut p, xa, xb) = setup_away_from_kinks(vec![1, 2, 3, 4]);
        p.variant = Variant::BatchTopk;
        let pre = encode(&p, &xa, &xb).unwrap();
        let sel = sparsify_batch_topk(&pre, &p, 6, 10).unwrap();
        let mask: Vec<bool> = sel.f.data().iter().map(|&v| v > 0.0).collect();
        assert!(mask.iter().filter(|&&m| m).count() >= 8);
        let (worst, _) = fd_check(&p, &xa, &xb, Penalty::none(), Gate::Mask(&mask));
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn perfect_reconstruction_without_penalty_is_zero() {
        let mut p = CrosscoderParams::zeros(Variant::L1, 2, 2, 2, vec![]).unwrap();
        p.b_dec_a = Matrix::from_rows(&[[1.0, -2.0]]);
        p.b_dec_b = Matrix::from_rows(&[[0.5, 0.0]]);
        let xa = Matrix::from_rows(&[[1.0, -2.0], [1.0, -2.0]]);
        let xb = Matrix::from_rows(&[[0.5, 0.0], [0.5, 0.0]]);
        let (l, g) = loss_l1(&p, &xa, &xb, 0.0).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.matrices().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_hot_two_with_unit_norms_costs_two() {
        let mut p = CrosscoderParams::zeros(Variant::L1, 2, 2, 3, vec![]).unwrap();
        p.w_dec_a.set(1, 0, 1.0);
        p.w_dec_b.set(1, 1, 1.0);
        p.b_enc = Matrix::from_rows(&[[-1.0, 2.0, -1.0]]);
        let z = Matrix::zeros(1, 2);
        let (l, _) = loss_l1(&p, &z, &z, 0.5).unwrap();
        assert_eq!(l.sparsity, 2.0);
        assert_eq!(l.l0, 1.0);
    }

    #[test]
    fn shared_loss_relates_to_l1_by_one_norm() {
        let (p, xa, xb) = random_setup(vec![2, 7, 11], 42);
        let lambda = 0.4;
        let (l1, _) = loss_l1(&p, &xa, &xb, lambda).unwrap();
        let (ls, _) = loss_shared(&p, &xa, &xb, lambda, lambda).unwrap();
        let f = relu(&encode(&p, &xa, &xb).unwrap());
        let mut extra = 0.0;
        for b in 0..B {
            for &i in p.shared_indices() {
                extra += f.get(b, i) * norm(p.decoder_row(Model::A, i));
            }
        }
        extra *= lambda / B as f64;
        assert!(extra > 0.0);
        assert!((l1.total - ls.total - extra).abs() < 1e-12);
        assert!(l1.rec_a == ls.rec_a && l1.rec_b == ls.rec_b);
    }

    #[test]
    fn shared_loss_requires_a_shared_set() {
        let (p, xa, xb) = random_setup(vec![], 5);
        assert!(loss_shared(&p, &xa, &xb, 0.1, 0.1).is_err());
        assert!(loss_and_grad(&p, &xa, &xb, Penalty::l1(-1.0), Gate::Relu).is_err());
    }
}
