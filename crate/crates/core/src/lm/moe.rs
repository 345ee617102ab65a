// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use super::layers::{mm, mm_into, Mlp, MlpCache};
use crate::linalg::{softmax_rows, Matrix};

/// Per-token top-k expert choice. Slot 0 holds the most probable expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub k: usize,
    /// `rows x k`, row-major.
    pub experts: Vec<usize>,
    /// Router probabilities renormalized over the selected experts.
    pub gates: Vec<f64>,
}

impl Routing {
    pub fn rows(&self) -> usize {
        self.experts.len() / self.k.max(1)
    }

    pub fn token_experts(&self, t: usize) -> &[usize] {
        &self.experts[t * self.k..(t + 1) * self.k]
    }

    pub fn token_gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.k..(t + 1) * self.k]
    }

    /// Most probable expert per token.
    pub fn top1(&self) -> Vec<usize> {
        (0..self.rows()).map(|t| self.experts[t * self.k]).collect()
    }
}

/// Picks the `k` largest probabilities per row (ties to the lower index) and
/// renormalizes them into gates.
pub fn route_topk(probs: &Matrix, k: usize) -> Routing {
    let (rows, n) = probs.shape();
    assert!(k >= 1 && k <= n, "top_k must lie in 1..=n_experts");
    let mut experts = Vec::with_capacity(rows * k);
    let mut gates = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = (0..n).collect();
    for t in 0..rows {
        let p = probs.row(t);
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        // Stable sort keeps lower indices first among equal probabilities.
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        let sel = &order[..k];
        let z: f64 = sel.iter().map(|&e| p[e]).sum();
        for &e in sel {
            experts.push(e);
            gates.push(p[e] / z);
        }
    }
    Routing { k, experts, gates }
}

/// Switch-style auxiliary loss `alpha * N * sum_i f_i * P_i`, with `f_i` the
/// fraction of tokens whose top-1 expert is `i` and `P_i` the mean router
/// probability of expert `i`.
pub fn load_balance_loss(probs: &Matrix, top1: &[usize], alpha: f64, n_experts: usize) -> f64 {
    let rows = probs.rows();
    if rows == 0 {
        return 0.0;
    }
    let (f, p) = balance_stats(probs, top1, n_experts);
    let mut s = 0.0;
    for i in 0..n_experts {
        s += f[i] * p[i];
    }
    alpha * n_experts as f64 * s
}

fn balance_stats(probs: &Matrix, top1: &[usize], n_experts: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = probs.rows() as f64;
    let mut f = vec![0.0; n_experts];
    for &e in top1 {
        f[e] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= rows);
    let mut p = probs.col_sums().into_vec();
    p.iter_mut().for_each(|v| *v /= rows);
    (f, p)
}

/// Router plus expert MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `d x n_experts`
    pub router: Matrix,
    pub experts: Vec<Mlp>,
}

/// Output of the expert mixture (without the residual add) and the routing
/// that produced it.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub out: Matrix,
    pub probs: Matrix,
    pub routing: Routing,
}

#[derive(Clone, Debug)]
struct ExpertCache {
    rows: Vec<usize>,
    slots: Vec<usize>,
    x: Matrix,
    y: Matrix,
    mlp: MlpCache,
}

#[derive(Clone, Debug)]
pub(crate) struct MoeCache {
    experts: Vec<ExpertCache>,
}

impl MoeLayer {
    pub fn zeros(d: usize, n_experts: usize, width: usize) -> Self {
        Self {
            router: Matrix::zeros(d, n_experts),
            experts: (0..n_experts).map(|_| Mlp::zeros(d, width)).collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn router_probs(&self, h: &Matrix) -> Matrix {
        softmax_rows(&mm(h.view(), self.router.view()))
    }

    /// `sum_{e in topk(h)} gate_e * expert_e(h)` per token.
    pub fn forward(&self, h: &Matrix, top_k: usize) -> MoeOutput {
        self.forward_cached(h, top_k).0
    }

    pub(crate) fn forward_cached(&self, h: &Matrix, top_k: usize) -> (MoeOutput, MoeCache) {
        let probs = self.router_probs(h);
        let routing = route_topk(&probs, top_k);
        let mut out = Matrix::zeros(h.rows(), h.cols());
        let mut caches = Vec::with_capacity(self.n_experts());
        for (e, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for t in 0..h.rows() {
                if let Some(j) = routing.token_experts(t).iter().position(|&x| x == e) {
                    rows.push(t);
                    slots.push(j);
                }
            }
            let x = h.gather_rows(&rows);
            let (y, mlp) = expert.forward_cached(&x);
            for (r, (&t, &j)) in rows.iter().zip(&slots).enumerate() {
                let g = routing.gates[t * top_k + j];
                for (o, v) in out.row_mut(t).iter_mut().zip(y.row(r)) {
                    *o += g * v;
                }
            }
            caches.push(ExpertCache { rows, slots, x, y, mlp });
        }
        (MoeOutput { out, probs, routing }, MoeCache { experts: caches })
    }

    /// Backward through experts, gates, router softmax and (when
    /// `lb_scale = alpha * N > 0`) the load-balance term. Returns `dL/dh`.
    pub(crate) fn backward(
        &self,
        h: &Matrix,
        dout: &Matrix,
        fwd: &MoeOutput,
        cache: &MoeCache,
        lb_scale: f64,
        grad: &mut MoeLayer,
    ) -> Matrix {
        let (rows, d) = h.shape();
        let n = self.n_experts();
        let k = fwd.routing.k;
        let mut dh = Matrix::zeros(rows, d);
        let mut dgate = vec![0.0; rows * k];
        for (e, ec) in cache.experts.iter().enumerate() {
            if ec.rows.is_empty() {
                continue;
            }
            let mut dy = Matrix::zeros(ec.rows.len(), d);
            for (r, (&t, &j)) in ec.rows.iter().zip(&ec.slots).enumerate() {
                let g = fwd.routing.gates[t * k + j];
                let up = dout.row(t);
                let mut acc = 0.0;
                for ((o, u), y) in dy.row_mut(r).iter_mut().zip(up).zip(ec.y.row(r)) {
                    *o = g * u;
                    acc += u * y;
                }
                dgate[t * k + j] = acc;
            }
            let dx = self.experts[e].backward(&ec.x, &dy, &ec.mlp, &mut grad.experts[e]);
            for (r, &t) in ec.rows.iter().enumerate() {
                for (o, v) in dh.row_mut(t).iter_mut().zip(dx.row(r)) {
                    *o += v;
                }
            }
        }

        // Gates g_j = p_j / Z over the selected set.
        let mut dprobs = Matrix::zeros(rows, n);
        for t in 0..rows {
            let sel = fwd.routing.token_experts(t);
            let gates = fwd.routing.token_gates(t);
            let p = fwd.probs.row(t);
            let z: f64 = sel.iter().map(|&e| p[e]).sum();
            let dg = &dgate[t * k..(t + 1) * k];
            let inner: f64 = dg.iter().zip(gates).map(|(a, b)| a * b).sum();
            let dp = dprobs.row_mut(t);
            for (j, &e) in sel.iter().enumerate() {
                dp[e] += (dg[j] - inner) / z;
            }
        }
        if lb_scale > 0.0 {
            let (f, _) = balance_stats(&fwd.probs, &fwd.routing.top1(), n);
            let inv_rows = 1.0 / rows as f64;
            for t in 0..rows {
                for (i, v) in dprobs.row_mut(t).iter_mut().enumerate() {
                    *v += lb_scale * f[i] * inv_rows;
                }
            }
        }
        // Softmax backward.
        let mut dlogits = dprobs;
        for t in 0..rows {
            let p = fwd.probs.row(t);
            let dl = dlogits.row_mut(t);
            let inner: f64 = p.iter().zip(dl.iter()).map(|(a, b)| a * b).sum();
            for (v, pi) in dl.iter_mut().zip(p) {
                *v = pi * (*v - inner);
            }
        }
        mm_into(h.view().t(), dlogits.view(), 1.0, &mut grad.router);
        mm_into(dlogits.view(), self.router.view().t(), 1.0, &mut dh);
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn random_mlp(r: &mut rng::DetRng, d: usize, w: usize) -> Mlp {
        let mut g = |rows, cols| Matrix::from_fn(rows, cols, |_, _| 0.5 * rng::normal(r));
        Mlp {
            w1: g(d, w),
            b1: g(1, w),
            w2: g(w, d),
            b2: g(1, d),
        }
    }

    #[test]
    fn topk_example() {
        let probs = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]]);
        let r = route_topk(&probs, 2);
        assert_eq!(r.experts, [3, 2]);
        assert_relative_eq!(r.gates[0], 0.4 / 0.7, epsilon = 1e-15);
        assert_relative_eq!(r.gates[1], 0.3 / 0.7, epsilon = 1e-15);
    }

    #[test]
    fn topk_all_experts_returns_probs() {
        let probs = softmax_rows(&Matrix::from_rows(&[[0.3, -1.0, 2.0, 0.5]]));
        let r = route_topk(&probs, 4);
        for (j, &e) in r.experts.iter().enumerate() {
            assert_relative_eq!(r.gates[j], probs.get(0, e), epsilon = 1e-15);
        }
    }

    #[test]
    fn topk_tie_goes_to_lower_index() {
        let probs = Matrix::from_rows(&[[0.4, 0.25, 0.25, 0.1]]);
        let r = route_topk(&probs, 2);
        assert_eq!(r.experts, [0, 1]);
    }

    #[test]
    fn gates_positive_and_normalized() {
        let mut r = rng::stream(4, 0);
        let logits = Matrix::from_fn(50, 8, |_, _| 2.0 * rng::normal(&mut r));
        let routing = route_topk(&softmax_rows(&logits), 3);
        for t in 0..50 {
            let g = routing.token_gates(t);
            assert!(g.iter().all(|&x| x > 0.0));
            assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn load_balance_extremes() {
        let n = 4;
        let uniform = Matrix::filled(8, n, 0.25);
        let top1: Vec<usize> = (0..8).map(|t| t % n).collect();
        assert!((load_balance_loss(&uniform, &top1, 0.01, n) - 0.01).abs() < 1e-12);
        let mut collapsed = Matrix::zeros(8, n);
        (0..8).for_each(|t| collapsed.set(t, 2, 1.0));
        assert!((load_balance_loss(&collapsed, &[2; 8], 0.01, n) - 0.04).abs() < 1e-12);
        assert_eq!(load_balance_loss(&collapsed, &[2; 8], 0.0, n), 0.0);
    }

    #[test]
    fn load_balance_minimized_at_uniform() {
        // Every token shares one perturbed router distribution, so f is the
        // one-hot argmax and the loss is alpha * N * max_i p_i >= alpha.
        let n = 4;
        let mut r = rng::stream(8, 1);
        let base = load_balance_loss(&Matrix::filled(8, n, 0.25), &[0, 1, 2, 3, 0, 1, 2, 3], 1.0, n);
        assert!((base - 1.0).abs() < 1e-12);
        for _ in 0..200 {
            let logit_row: Vec<f64> = (0..n).map(|_| 0.3 * rng::normal(&mut r)).collect();
            let logits = Matrix::from_fn(8, n, |_, j| logit_row[j]);
            let probs = softmax_rows(&logits);
            let routing = route_topk(&probs, 1);
            let l = load_balance_loss(&probs, &routing.top1(), 1.0, n);
            assert!(l > base, "{l} <= {base}");
        }
    }

    #[test]
    fn single_expert_equals_dense_mlp() {
        let mut r = rng::stream(1, 0);
        let mlp = random_mlp(&mut r, 6, 10);
        let layer = MoeLayer {
            router: Matrix::from_fn(6, 1, |_, _| rng::normal(&mut r)),
            experts: alloc::vec![mlp.clone()],
        };
        let h = Matrix::from_fn(100, 6, |_, _| rng::normal(&mut r));
        let moe = layer.forward(&h, 1).out;
        assert!(moe.max_abs_diff(&mlp.forward(&h)) <= 1e-9);
    }

    #[test]
    fn identical_experts_reduce_to_one() {
        let mut r = rng::stream(2, 0);
        let mlp = random_mlp(&mut r, 5, 7);
        let layer = MoeLayer {
            router: Matrix::from_fn(5, 3, |_, _| rng::normal(&mut r)),
            experts: alloc::vec![mlp.clone(), mlp.clone(), mlp.clone()],
        };
        let h = Matrix::from_fn(20, 5, |_, _| rng::normal(&mut r));
        assert!(layer.forward(&h, 2).out.max_abs_diff(&mlp.forward(&h)) <= 1e-12);
    }

    #[test]
    fn matches_brute_force_mixture() {
        let mut r = rng::stream(3, 0);
        let layer = MoeLayer {
            router: Matrix::from_fn(4, 3, |_, _| rng::normal(&mut r)),
            experts: (0..3).map(|_| random_mlp(&mut r, 4, 6)).collect(),
        };
        let h = Matrix::from_fn(12, 4, |_, _| rng::normal(&mut r));
        let out = layer.forward(&h, 2);
        for t in 0..12 {
            // Independent recomputation: softmax, sort, renormalize, sum.
            let x = h.gather_rows(&[t]);
            let logits: Vec<f64> = (0..3)
                .map(|e| (0..4).map(|i| x.get(0, i) * layer.router.get(i, e)).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
            let z: f64 = ex.iter().sum();
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&a, &b| ex[b].partial_cmp(&ex[a]).unwrap());
            let (a, b) = (idx[0], idx[1]);
            let (pa, pb) = (ex[a] / z, ex[b] / z);
            let ya = layer.experts[a].forward(&x);
            let yb = layer.experts[b].forward(&x);
            for j in 0..4 {
                let expect = (pa * ya.get(0, j) + pb * yb.get(0, j)) / (pa + pb);
                assert_relative_eq!(out.out.get(t, j), expect, epsilon = 1e-12);
            }
        }
    }
}
