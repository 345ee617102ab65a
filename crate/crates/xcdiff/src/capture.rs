// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream capture at one block output, for both splits of the
//! corpus. Windows are fed as `[BOS] + w[..L-1]`; the BOS position is not
//! captured, so every window contributes `L - 1` rows.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xcdiff_core::activations::ActivationTable;
use xcdiff_core::lm::{forward, LmParams, Windows, VOCAB_SIZE};

use crate::corpus::Corpus;
use crate::error::{CliError, CliResult};
use crate::shards::{self, Manifest, TokenStream};

/// Windows per forward call.
const CHUNK_WINDOWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    /// 0-based block index; 2 is the output of the third block.
    pub layer: usize,
    /// Window length; defaults to the model's context length.
    pub window_len: Option<usize>,
    /// Evenly strided subset of training windows, if set.
    pub max_train_windows: Option<usize>,
    pub max_eval_windows: Option<usize>,
    pub shard_bytes: usize,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            layer: 2,
            window_len: None,
            max_train_windows: None,
            max_eval_windows: None,
            shard_bytes: shards::DEFAULT_SHARD_BYTES,
        }
    }
}

/// `n` window indices spread evenly over `0..total` (all of them if `n >= total`).
pub fn strided(total: usize, n: Option<usize>) -> Vec<usize> {
    match n {
        Some(n) if n < total => (0..n).map(|i| i * total / n).collect(),
        _ => (0..total).collect(),
    }
}

fn check_model(params: &LmParams, layer: usize, window_len: usize) -> CliResult<()> {
    let c = &params.config;
    if c.vocab_size != VOCAB_SIZE {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary {} does not match the byte tokenizer ({VOCAB_SIZE})",
            c.vocab_size
        )));
    }
    if layer >= c.n_layers {
        return Err(CliError::Config(format!(
            "layer {layer} out of range for a {}-layer model (0-based)",
            c.n_layers
        )));
    }
    if window_len < 2 || window_len > c.context_length {
        return Err(CliError::Config(format!(
            "window length {window_len} must be in 2..={}",
            c.context_length
        )));
    }
    Ok(())
}

/// Captures block `layer` outputs on the selected windows.
pub fn capture_windows(
    params: &LmParams,
    windows: &Windows,
    select: &[usize],
    layer: usize,
) -> CliResult<(ActivationTable, TokenStream)> {
    let l = windows.seq_len();
    check_model(params, layer, l)?;
    let d = params.config.d_model;
    let mut table = ActivationTable::new(d);
    let mut stream = TokenStream {
        window_len: l,
        windows: Vec::with_capacity(select.len()),
        positions: (1..l).collect(),
    };
    for chunk in select.chunks(CHUNK_WINDOWS) {
        let mut tokens = Vec::with_capacity(chunk.len() * l);
        for &w in chunk {
            let input = windows.input(w);
            tokens.extend_from_slice(&input);
            stream.windows.push(input);
        }
        let out = forward(params, &tokens, l, Some(layer))?;
        let h = &out.block_outputs[layer];
        for s in 0..chunk.len() {
            for p in 1..l {
                table.push_row(h.row(s * l + p));
            }
        }
    }
    Ok((table, stream))
}

/// Largest absolute difference between stored rows and a fresh forward
/// pass on their recorded windows.
pub fn spot_check(params: &LmParams, table: &ActivationTable, tokens: &TokenStream, layer: usize, rows: &[usize]) -> CliResult<f64> {
    check_model(params, layer, tokens.window_len)?;
    let mut worst = 0.0f64;
    for &row in rows {
        let (w, pos) = tokens.locate(row);
        let out = forward(params, &tokens.windows[w], tokens.window_len, Some(layer))?;
        let fresh = out.block_outputs[layer].row(pos);
        for (a, b) in fresh.iter().zip(table.row(row)) {
            worst = worst.max((a - f64::from(*b)).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CaptureOutput {
    pub train: Manifest,
    pub eval: Manifest,
}

/// Captures one model on both splits into `out/train` and `out/eval`.
pub fn capture_model(
    params: &LmParams,
    model_id: &str,
    corpus: &Corpus,
    cfg: &CaptureConfig,
    out: &Path,
) -> CliResult<CaptureOutput> {
    let l = cfg.window_len.unwrap_or(params.config.context_length);
    check_model(params, cfg.layer, l)?;
    let mut manifests = Vec::new();
    for (split, windows, cap) in [
        ("train", corpus.train_windows(l), cfg.max_train_windows),
        ("eval", corpus.eval_windows(l), cfg.max_eval_windows),
    ] {
        if windows.is_empty() {
            return Err(CliError::Config(format!("{split} split has no windows of length {l}")));
        }
        let select = strided(windows.len(), cap);
        let (table, tokens) = capture_windows(params, &windows, &select, cfg.layer)?;
        manifests.push(shards::write_set(&out.join(split), model_id, cfg.layer, &table, &tokens, cfg.shard_bytes)?);
    }
    let eval = manifests.pop().expect("two splits");
    let train = manifests.pop().expect("two splits");
    Ok(CaptureOutput { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use xcdiff_core::lm::{Arch, LmConfig, MoeConfig};
    use xcdiff_core::rng;

    fn model(arch: Arch) -> LmParams {
        let cfg = LmConfig {
            arch,
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: VOCAB_SIZE,
            context_length: 16,
            moe: MoeConfig {
                n_experts: 4,
                top_k: 2,
                load_balance_alpha: 0.01,
            },
            init_std: 0.1,
        };
        LmParams::init(&cfg, &mut rng::stream(9, 1)).unwrap()
    }

    #[test]
    fn strided_selection() {
        assert_eq!(strided(10, Some(4)), vec![0, 2, 5, 7]);
        assert_eq!(strided(3, Some(5)), vec![0, 1, 2]);
        assert_eq!(strided(3, None), vec![0, 1, 2]);
    }

    #[test]
    fn rows_match_a_fresh_forward_pass() {
        let text: Vec<u32> = (0..400u32).map(|i| (i * 7 + 3) % 256).collect();
        let w = Windows::from_streams(&[text], 16);
        for arch in [Arch::Dense, Arch::Moe] {
            let p = model(arch);
            let sel = strided(w.len(), None);
            let (table, tokens) = capture_windows(&p, &w, &sel, 1).unwrap();
            assert_eq!(table.rows(), w.len() * 15);
            assert!(tokens.windows.iter().all(|win| win[0] == xcdiff_core::lm::BOS));
            let rows: Vec<usize> = (0..table.rows()).step_by(7).collect();
            assert!(spot_check(&p, &table, &tokens, 1, &rows).unwrap() < 1e-6);
        }
    }

    #[test]
    fn layer_out_of_range_is_a_config_error() {
        let w = Windows::from_streams(&[vec![1u32; 64]], 16);
        let err = capture_windows(&model(Arch::Dense), &w, &[0], 3).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let long = Windows::from_streams(&[vec![1u32; 64]], 32);
        assert!(capture_windows(&model(Arch::Dense), &long, &[0], 0).is_err());
    }
}
