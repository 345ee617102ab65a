// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{gemm, MatRef, Matrix};
use crate::math::{exp, gelu, gelu_grad, sqrt};

pub const LN_EPS: f64 = 1e-5;

/// Saved normalized rows and reciprocal standard deviations.
#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

/// Row-wise layer norm with gain and bias (`1 x d` each).
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    layer_norm_cached(x, gain, bias).0
}

pub(crate) fn layer_norm_cached(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (rows, d) = x.shape();
    let mut xhat = Matrix::zeros(rows, d);
    let mut y = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / sqrt(var + LN_EPS);
        rstd.push(s);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(r) {
            *o = (v - mean) * s;
        }
        let xh = xhat.row(i);
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * xh[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates gain/bias gradients and returns the input gradient.
pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let g = gain.data();
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        {
            let dg = dgain.data_mut();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        {
            let db = dbias.data_mut();
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `c (+)= a * b` on whole matrices.
#[inline]
pub(crate) fn mm_into(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut Matrix) {
    debug_assert_eq!((a.rows(), b.cols()), c.shape());
    let n = c.cols();
    gemm(a, b, beta, c.data_mut(), n);
}

pub(crate) fn mm(a: MatRef<'_>, b: MatRef<'_>) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    mm_into(a, b, 0.0, &mut c);
    c
}

fn add_col_sums(dst: &mut Matrix, m: &Matrix) {
    let d = dst.data_mut();
    for r in m.data().chunks_exact(m.cols().max(1)) {
        for (o, v) in d.iter_mut().zip(r) {
            *o += v;
        }
    }
}

/// Two-layer GELU MLP: `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache {
    z1: Matrix,
    a1: Matrix,
}

impl Mlp {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, d),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let mut z1 = mm(x.view(), self.w1.view());
        z1.add_row_broadcast(self.b1.data());
        let mut a1 = z1.clone();
        a1.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = mm(a1.view(), self.w2.view());
        y.add_row_broadcast(self.b2.data());
        (y, MlpCache { z1, a1 })
    }

    pub(crate) fn backward(&self, x: &Matrix, dy: &Matrix, cache: &MlpCache, grad: &mut Mlp) -> Matrix {
        mm_into(cache.a1.view().t(), dy.view(), 1.0, &mut grad.w2);
        add_col_sums(&mut grad.b2, dy);
        let mut dz = mm(dy.view(), self.w2.view().t());
        for (g, z) in dz.data_mut().iter_mut().zip(cache.z1.data()) {
            *g *= gelu_grad(*z);
        }
        mm_into(x.view().t(), dz.view(), 1.0, &mut grad.w1);
        add_col_sums(&mut grad.b1, &dz);
        mm(dz.view(), self.w1.view().t())
    }

    pub(crate) fn matrices(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Causal multi-head self-attention weights (no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `[seq][head][L x L]` row-stochastic, zero above the diagonal.
    probs: Vec<f64>,
    o: Matrix,
}

/// Batch layout: `n_seq` sequences of `seq_len` rows each, stacked.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        }
    }

    pub(crate) fn forward_cached(&self, h: &Matrix, n_heads: usize, layout: SeqLayout) -> (Matrix, AttnCache) {
        let d = h.cols();
        let dh = d / n_heads;
        let l = layout.seq_len;
        let scale = 1.0 / sqrt(dh as f64);
        let q = mm(h.view(), self.wq.view());
        let k = mm(h.view(), self.wk.view());
        let v = mm(h.view(), self.wv.view());
        let mut probs = vec![0.0; layout.n_seq * n_heads * l * l];
        let mut o = Matrix::zeros(h.rows(), d);
        for s in 0..layout.n_seq {
            for hd in 0..n_heads {
                let off = s * l * d + hd * dh;
                let qh = MatRef::strided(&q.data()[off..], l, dh, d, 1);
                let kh = MatRef::strided(&k.data()[off..], l, dh, d, 1);
                let vh = MatRef::strided(&v.data()[off..], l, dh, d, 1);
                let p = &mut probs[(s * n_heads + hd) * l * l..][..l * l];
                gemm(qh, kh.t(), 0.0, p, l);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let mut max = f64::NEG_INFINITY;
                    for x in &mut row[..=i] {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in &mut row[..=i] {
                        *x = exp(*x - max);
                        sum += *x;
                    }
                    let inv = 1.0 / sum;
                    for x in &mut row[..=i] {
                        *x *= inv;
                    }
                    for x in &mut row[i + 1..] {
                        *x = 0.0;
                    }
                }
                let p = MatRef::row_major(&probs[(s * n_heads + hd) * l * l..][..l * l], l, l);
                gemm(p, vh, 0.0, &mut o.data_mut()[off..], d);
            }
        }
        let out = mm(o.view(), self.wo.view());
        (out, AttnCache { q, k, v, probs, o })
    }

    /// Accumulates weight gradients; returns the gradient w.r.t. `h`.
    pub(crate) fn backward(
        &self,
        h: &Matrix,
        dout: &Matrix,
        cache: &AttnCache,
        n_heads: usize,
        layout: SeqLayout,
        grad: &mut Attention,
    ) -> Matrix {
        let d = h.cols();
        let dh = d / n_heads;
        let l = layout.seq_len;
        let scale = 1.0 / sqrt(dh as f64);
        mm_into(cache.o.view().t(), dout.view(), 1.0, &mut grad.wo);
        let dov = mm(dout.view(), self.wo.view().t());
        let mut dq = Matrix::zeros(h.rows(), d);
        let mut dk = Matrix::zeros(h.rows(), d);
        let mut dv = Matrix::zeros(h.rows(), d);
        let mut dp = vec![0.0; l * l];
        for s in 0..layout.n_seq {
            for hd in 0..n_heads {
                let off = s * l * d + hd * dh;
                let p = &cache.probs[(s * n_heads + hd) * l * l..][..l * l];
                let pv = MatRef::row_major(p, l, l);
                let doh = MatRef::strided(&dov.data()[off..], l, dh, d, 1);
                let qh = MatRef::strided(&cache.q.data()[off..], l, dh, d, 1);
                let kh = MatRef::strided(&cache.k.data()[off..], l, dh, d, 1);
                let vh = MatRef::strided(&cache.v.data()[off..], l, dh, d, 1);
                gemm(pv.t(), doh, 0.0, &mut dv.data_mut()[off..], d);
                gemm(doh, vh.t(), 0.0, &mut dp, l);
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let mut inner = 0.0;
                    for j in 0..=i {
                        inner += pr[j] * dr[j];
                    }
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - inner) * scale;
                    }
                    for x in &mut dr[i + 1..] {
                        *x = 0.0;
                    }
                }
                let ds = MatRef::row_major(&dp, l, l);
                gemm(ds, kh, 0.0, &mut dq.data_mut()[off..], d);
                gemm(ds.t(), qh, 0.0, &mut dk.data_mut()[off..], d);
            }
        }
        mm_into(h.view().t(), dq.view(), 1.0, &mut grad.wq);
        mm_into(h.view().t(), dk.view(), 1.0, &mut grad.wk);
        mm_into(h.view().t(), dv.view(), 1.0, &mut grad.wv);
        let mut dh_out = mm(dq.view(), self.wq.view().t());
        mm_into(dk.view(), self.wk.view().t(), 1.0, &mut dh_out);
        mm_into(dv.view(), self.wv.view().t(), 1.0, &mut dh_out);
        dh_out
    }

    pub(crate) fn matrices(&self) -> [&Matrix; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}
