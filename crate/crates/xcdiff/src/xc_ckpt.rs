// SPDX-License-Identifier: MIT OR Apache-2.0

//! `XCXC` crosscoder checkpoints: JSON header, then the eight parameter
//! matrices in `CrosscoderParams::MATRIX_NAMES` order as f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xcdiff_core::crosscoder::{CrosscoderParams, Thresholds, Variant, XcTrainConfig};

use crate::binio::{Reader, Writer};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"XCXC";
pub const VERSION: u32 = 1;

/// Where the training activations came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_a: String,
    pub model_b: String,
    pub layer_index: usize,
    pub scale_a: f64,
    pub scale_b: f64,
    pub token_stream_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: Variant,
    d_a: usize,
    d_b: usize,
    n_features: usize,
    shared: Vec<usize>,
    thresholds: Option<Thresholds>,
    steps_trained: u64,
    matrices: Vec<String>,
    train: XcTrainConfig,
    source: Provenance,
}

#[derive(Clone, Debug)]
pub struct XcCheckpoint {
    pub params: CrosscoderParams,
    pub train: XcTrainConfig,
    pub source: Provenance,
}

pub fn save(path: &Path, ckpt: &XcCheckpoint) -> CliResult<()> {
    let p = &ckpt.params;
    let header = Header {
        variant: p.variant,
        d_a: p.d_a(),
        d_b: p.d_b(),
        n_features: p.n_features(),
        shared: p.shared_indices().to_vec(),
        thresholds: p.thresholds,
        steps_trained: p.steps_trained,
        matrices: CrosscoderParams::MATRIX_NAMES.iter().map(|s| s.to_string()).collect(),
        train: ckpt.train.clone(),
        source: ckpt.source.clone(),
    };
    let mut w = Writer::create(path, MAGIC, VERSION, &header)?;
    for m in p.matrices() {
        w.matrix(m)?;
    }
    w.finish()
}

pub fn load(path: &Path) -> CliResult<XcCheckpoint> {
    let (mut r, version, h): (_, _, Header) = Reader::open(path, MAGIC)?;
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported checkpoint version {version}")));
    }
    if h.matrices != CrosscoderParams::MATRIX_NAMES {
        return Err(CliError::format(path, "unexpected matrix list"));
    }
    let mats = (0..8).map(|_| r.matrix()).collect::<CliResult<Vec<_>>>()?;
    r.expect_end()?;
    let mut params = CrosscoderParams::from_matrices(h.variant, h.d_a, h.d_b, h.n_features, h.shared, mats)?;
    params.thresholds = h.thresholds;
    params.steps_trained = h.steps_trained;
    Ok(XcCheckpoint {
        params,
        train: h.train,
        source: h.source,
    })
}

/// Loads a checkpoint and refuses one that never took an optimizer step.
pub fn load_trained(path: &Path) -> CliResult<XcCheckpoint> {
    let c = load(path)?;
    if !c.params.is_trained() {
        return Err(CliError::Config(format!("{} holds an untrained crosscoder", path.display())));
    }
    Ok(c)
}
