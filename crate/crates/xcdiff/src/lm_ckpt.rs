// SPDX-License-Identifier: MIT OR Apache-2.0

//! `XCLM` language-model checkpoints. Weights are stored as f32, so a
//! loaded model is the f32 rounding of the trained one.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xcdiff_core::lm::{LmCheckpoint, LmConfig, LmParams, TrainMeta};

use crate::binio::{Reader, Writer};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"XCLM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    meta: TrainMeta,
    matrices: Vec<String>,
}

pub fn save(path: &Path, ckpt: &LmCheckpoint) -> CliResult<()> {
    let named = ckpt.params.named_matrices();
    let header = Header {
        config: ckpt.params.config,
        meta: ckpt.meta.clone(),
        matrices: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    let mut w = Writer::create(path, MAGIC, VERSION, &header)?;
    for (_, m) in named {
        w.matrix(m)?;
    }
    w.finish()
}

pub fn load(path: &Path) -> CliResult<LmCheckpoint> {
    let (mut r, version, header): (_, _, Header) = Reader::open(path, MAGIC)?;
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let expected = LmParams::zeros(&header.config).named_matrices().len();
    if header.matrices.len() != expected {
        return Err(CliError::format(
            path,
            format!("{} matrices listed, config implies {expected}", header.matrices.len()),
        ));
    }
    let mats = (0..expected).map(|_| r.matrix()).collect::<CliResult<Vec<_>>>()?;
    r.expect_end()?;
    let params = LmParams::from_matrices(&header.config, mats)?;
    Ok(LmCheckpoint {
        params,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use xcdiff_core::lm::{Arch, MoeConfig};
    use xcdiff_core::rng;

    fn tiny(arch: Arch) -> LmCheckpoint {
        let config = LmConfig {
            arch,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            context_length: 8,
            moe: MoeConfig {
                n_experts: 3,
                top_k: 2,
                load_balance_alpha: 0.01,
            },
            init_std: 0.02,
        };
        LmCheckpoint {
            params: LmParams::init(&config, &mut rng::stream(1, 1)).unwrap(),
            meta: TrainMeta {
                seed: 1,
                steps: 10,
                initial_loss: 3.0,
                final_loss: 2.0,
                expert_usage: vec![vec![1, 2, 3]; 2],
                ..TrainMeta::default()
            },
        }
    }

    #[test]
    fn round_trip_is_f32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Dense, Arch::Moe] {
            let c = tiny(arch);
            let p = dir.path().join("m.xclm");
            save(&p, &c).unwrap();
            let back = load(&p).unwrap();
            assert_eq!(back.meta, c.meta);
            for ((n, a), (_, b)) in c.params.named_matrices().iter().zip(back.params.named_matrices()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!((*x as f32) as f64, *y, "{n}");
                }
            }
            save(&dir.path().join("again.xclm"), &back).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("again.xclm")).unwrap());
        }
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xclm");
        save(&p, &tiny(Arch::Dense)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&p).is_err());
        std::fs::write(&p, b"XACT....").unwrap();
        assert!(load(&p).is_err());
    }
}
