// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use super::layers::{layer_norm_backward, layer_norm_cached, mm, mm_into, AttnCache, LnCache, MlpCache, SeqLayout};
use super::moe::{load_balance_loss, MoeCache, MoeOutput, Routing};
use super::params::{Ffn, LmParams};
use crate::linalg::{cross_entropy, Matrix};
use crate::{Error, Result};

/// Result of a forward pass over `n_seq` stacked sequences.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `rows x vocab`; absent when the pass stopped early.
    pub logits: Option<Matrix>,
    /// Residual stream after each computed block.
    pub block_outputs: Vec<Matrix>,
    /// Per MoE block: `alpha * N * sum f_i P_i`.
    pub load_balance: Vec<f64>,
    pub routings: Vec<Routing>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmLoss {
    pub ce: f64,
    pub load_balance: f64,
    pub total: f64,
}

enum FfnCache {
    Dense(MlpCache),
    Moe(MoeOutput, MoeCache),
}

struct BlockCache {
    h1: Matrix,
    ln1: LnCache,
    attn: AttnCache,
    h2: Matrix,
    ln2: LnCache,
    ffn: FfnCache,
}

struct Caches {
    blocks: Vec<BlockCache>,
    hf: Matrix,
    lnf: LnCache,
}

fn check_input(params: &LmParams, tokens: &[u32], seq_len: usize) -> Result<SeqLayout> {
    let cfg = &params.config;
    if seq_len == 0 || seq_len > cfg.context_length {
        return Err(Error::Input(alloc::format!(
            "sequence length {seq_len} exceeds context length {}",
            cfg.context_length
        )));
    }
    if !tokens.len().is_multiple_of(seq_len) {
        return Err(Error::Shape {
            op: "forward",
            lhs: (tokens.len(), 1),
            rhs: (seq_len, 1),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: t as usize,
            len: cfg.vocab_size,
        });
    }
    Ok(SeqLayout {
        n_seq: tokens.len() / seq_len,
        seq_len,
    })
}

fn run(
    params: &LmParams,
    tokens: &[u32],
    layout: SeqLayout,
    keep_cache: bool,
    stop_after: Option<usize>,
) -> (ForwardOutput, Option<Caches>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let rows = tokens.len();
    let mut x = Matrix::zeros(rows, d);
    for (r, &t) in tokens.iter().enumerate() {
        let pos = r % layout.seq_len;
        let te = params.tok_emb.row(t as usize);
        let pe = params.pos_emb.row(pos);
        for ((o, a), b) in x.row_mut(r).iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }
    let mut out = ForwardOutput {
        logits: None,
        block_outputs: Vec::with_capacity(cfg.n_layers),
        load_balance: Vec::new(),
        routings: Vec::new(),
    };
    let mut caches = Vec::new();
    for (l, b) in params.blocks.iter().enumerate() {
        let (h1, ln1) = layer_norm_cached(&x, &b.ln1_gain, &b.ln1_bias);
        let (a, attn) = b.attn.forward_cached(&h1, cfg.n_heads, layout);
        x.add_assign(&a).expect("attention output shape");
        let (h2, ln2) = layer_norm_cached(&x, &b.ln2_gain, &b.ln2_bias);
        let ffn = match &b.ffn {
            Ffn::Dense(mlp) => {
                let (y, c) = mlp.forward_cached(&h2);
                x.add_assign(&y).expect("mlp output shape");
                FfnCache::Dense(c)
            }
            Ffn::Moe(layer) => {
                let (mo, c) = layer.forward_cached(&h2, cfg.moe.top_k);
                x.add_assign(&mo.out).expect("moe output shape");
                out.load_balance.push(load_balance_loss(
                    &mo.probs,
                    &mo.routing.top1(),
                    cfg.moe.load_balance_alpha,
                    layer.n_experts(),
                ));
                out.routings.push(mo.routing.clone());
                FfnCache::Moe(mo, c)
            }
        };
        out.block_outputs.push(x.clone());
        if keep_cache {
            caches.push(BlockCache { h1, ln1, attn, h2, ln2, ffn });
        }
        if stop_after == Some(l) {
            return (out, None);
        }
    }
    let (hf, lnf) = layer_norm_cached(&x, &params.lnf_gain, &params.lnf_bias);
    out.logits = Some(mm(hf.view(), params.unembed.view()));
    let caches = keep_cache.then_some(Caches { blocks: caches, hf, lnf });
    (out, caches)
}

/// Inference forward pass over sequences of `seq_len` tokens stacked in
/// `tokens`. With `stop_after = Some(l)` the pass ends after block `l`
/// (0-based) and no logits are produced.
pub fn forward(params: &LmParams, tokens: &[u32], seq_len: usize, stop_after: Option<usize>) -> Result<ForwardOutput> {
    let layout = check_input(params, tokens, seq_len)?;
    if let Some(l) = stop_after {
        if l >= params.config.n_layers {
            return Err(Error::LayerRange {
                layer: l,
                n_layers: params.config.n_layers,
            });
        }
    }
    Ok(run(params, tokens, layout, false, stop_after).0)
}

/// Mean next-token cross-entropy plus (for MoE) the summed load-balance
/// terms, with gradients for every weight.
pub fn loss_and_grad(
    params: &LmParams,
    inputs: &[u32],
    targets: &[u32],
    seq_len: usize,
) -> Result<(LmLoss, LmParams, Vec<Routing>)> {
    let layout = check_input(params, inputs, seq_len)?;
    let cfg = &params.config;
    let (fwd, caches) = run(params, inputs, layout, true, None);
    let caches = caches.expect("caches requested");
    let logits = fwd.logits.as_ref().expect("full pass");
    let ce = cross_entropy(logits, targets)?;
    let lb: f64 = fwd.load_balance.iter().sum();
    let loss = LmLoss {
        ce: ce.loss,
        load_balance: lb,
        total: ce.loss + lb,
    };

    let mut g = LmParams::zeros(cfg);
    mm_into(caches.hf.view().t(), ce.grad.view(), 1.0, &mut g.unembed);
    let dhf = mm(ce.grad.view(), params.unembed.view().t());
    let mut dx = layer_norm_backward(&dhf, &caches.lnf, &params.lnf_gain, &mut g.lnf_gain, &mut g.lnf_bias);

    let lb_scale = cfg.moe.load_balance_alpha * cfg.moe.n_experts as f64;
    for (l, (b, c)) in params.blocks.iter().zip(&caches.blocks).enumerate().rev() {
        let gb = &mut g.blocks[l];
        let dh2 = match (&b.ffn, &c.ffn, &mut gb.ffn) {
            (Ffn::Dense(mlp), FfnCache::Dense(mc), Ffn::Dense(gm)) => mlp.backward(&c.h2, &dx, mc, gm),
            (Ffn::Moe(layer), FfnCache::Moe(mo, mc), Ffn::Moe(gl)) => {
                layer.backward(&c.h2, &dx, mo, mc, lb_scale, gl)
            }
            _ => unreachable!("gradient container built from the same config"),
        };
        let d_mid = layer_norm_backward(&dh2, &c.ln2, &b.ln2_gain, &mut gb.ln2_gain, &mut gb.ln2_bias);
        dx.add_assign(&d_mid)?;
        let dh1 = b.attn.backward(&c.h1, &dx, &c.attn, cfg.n_heads, layout, &mut gb.attn);
        let d_in = layer_norm_backward(&dh1, &c.ln1, &b.ln1_gain, &mut gb.ln1_gain, &mut gb.ln1_bias);
        dx.add_assign(&d_in)?;
    }
    for (r, &t) in inputs.iter().enumerate() {
        let pos = r % layout.seq_len;
        let src = dx.row(r);
        for (o, v) in g.tok_emb.row_mut(t as usize).iter_mut().zip(src) {
            *o += v;
        }
        for (o, v) in g.pos_emb.row_mut(pos).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok((loss, g, fwd.routings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Arch, LmConfig, MoeConfig};
    use crate::math::ln;
    use crate::rng;

    fn micro(arch: Arch) -> LmConfig {
        LmConfig {
            arch,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 16,
            context_length: 6,
            moe: MoeConfig {
                n_experts: 4,
                top_k: 2,
                load_balance_alpha: 0.1,
            },
            init_std: 0.5,
        }
    }

    fn tokens(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
        let mut r = rng::stream(seed, 5);
        (0..n).map(|_| rng::index(&mut r, vocab as usize) as u32).collect()
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let cfg = LmConfig::default();
        let p = LmParams::init(&cfg, &mut rng::stream(1, 0)).unwrap();
        let input = tokens(2 * 32, 256, 2);
        let target = tokens(2 * 32, 256, 3);
        let (loss, _, _) = loss_and_grad(&p, &input, &target, 32).unwrap();
        assert!((loss.ce - ln(259.0)).abs() < 0.1, "ce {}", loss.ce);
    }

    #[test]
    fn zero_unembedding_is_exactly_uniform() {
        let cfg = micro(Arch::Dense);
        let mut p = LmParams::init(&cfg, &mut rng::stream(1, 0)).unwrap();
        p.unembed.fill(0.0);
        let out = forward(&p, &tokens(6, 16, 1), 6, None).unwrap();
        let logits = out.logits.unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_length_checked() {
        let cfg = micro(Arch::Moe);
        let p = LmParams::init(&cfg, &mut rng::stream(1, 0)).unwrap();
        let t = tokens(12, 16, 4);
        let a = forward(&p, &t, 6, None).unwrap();
        let b = forward(&p, &t, 6, None).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(matches!(forward(&p, &tokens(7, 16, 4), 7, None), Err(Error::Input(_))));
        assert!(matches!(forward(&p, &t, 6, Some(2)), Err(Error::LayerRange { .. })));
        let early = forward(&p, &t, 6, Some(0)).unwrap();
        assert!(early.logits.is_none());
        assert_eq!(early.block_outputs[0], a.block_outputs[0]);
    }

    /// Central differences over every parameter of a micro model.
    fn check_gradients(arch: Arch, seed: u64) {
        let cfg = micro(arch);
        let p = LmParams::init(&cfg, &mut rng::stream(seed, 0)).unwrap();
        let input = tokens(12, 16, seed + 10);
        let target = tokens(12, 16, seed + 20);
        let (_, grad, routing) = loss_and_grad(&p, &input, &target, 6).unwrap();
        let h = 1e-5;
        let grads: Vec<f64> = grad.named_matrices().iter().flat_map(|(_, m)| m.data().to_vec()).collect();
        let mut idx = 0;
        let mut worst = 0.0f64;
        let n_mats = p.named_matrices().len();
        for mi in 0..n_mats {
            let len = p.named_matrices()[mi].1.len();
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.matrices_mut()[mi].data_mut()[j] += delta;
                    let (l, _, r) = loss_and_grad(&q, &input, &target, 6).unwrap();
                    (l.total, r)
                };
                let (lp, rp) = eval(h);
                let (lm, rm) = eval(-h);
                // Skip coordinates whose perturbation flips a routing decision.
                if rp != routing || rm != routing {
                    idx += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel <= 1e-4, "{} [{j}]: fd {fd} analytic {an}", p.named_matrices()[mi].0);
                idx += 1;
            }
        }
        assert!(worst <= 1e-4);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        check_gradients(Arch::Dense, 3);
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        check_gradients(Arch::Moe, 4);
    }
}
