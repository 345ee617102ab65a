// SPDX-License-Identifier: MIT OR Apache-2.0

//! `XACT` activation shards and the per-model manifest.
//!
//! A capture directory holds one shard set per split (`train/`, `eval/`),
//! each with `manifest.json`, numbered `.xact` shards and `tokens.bin`, the
//! captured token ids (u32 LE) with their window positions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xcdiff_core::activations::{normalization_scale, ActivationTable, PairedActivations};

use crate::binio::{read_json, write_json, Reader, Writer};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"XACT";
pub const VERSION: u32 = 1;
pub const DEFAULT_SHARD_BYTES: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub model_id: String,
    pub layer_index: usize,
    pub d: usize,
    pub n_tokens: usize,
    pub normalization_scale: f64,
    pub token_stream_hash: String,
    pub shard_index: usize,
    pub first_row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub n_tokens: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub layer_index: usize,
    pub d: usize,
    pub n_tokens: usize,
    pub normalization_scale: f64,
    pub token_stream_hash: String,
    /// Length of each captured window (input tokens, BOS first).
    pub window_len: usize,
    pub shards: Vec<ShardEntry>,
}

/// Row `i` was captured at input position `pos[i]` of window `window[i]`
/// and that position holds `token[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub window_len: usize,
    pub windows: Vec<Vec<u32>>,
    /// Input positions captured in every window.
    pub positions: Vec<usize>,
}

impl TokenStream {
    pub fn rows(&self) -> usize {
        self.windows.len() * self.positions.len()
    }

    /// (window, position) of a row.
    pub fn locate(&self, row: usize) -> (usize, usize) {
        let per = self.positions.len();
        (row / per, self.positions[row % per])
    }

    /// 64-bit digest (first 8 bytes of SHA-256, hex) over the layout and ids.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.window_len as u64).to_le_bytes());
        h.update((self.windows.len() as u64).to_le_bytes());
        for &p in &self.positions {
            h.update((p as u64).to_le_bytes());
        }
        for w in &self.windows {
            for &t in w {
                h.update(t.to_le_bytes());
            }
        }
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.window_len, self.windows.len(), self.positions.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &p in &self.positions {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        for w in &self.windows {
            for &t in w {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    fn decode(path: &Path, bytes: &[u8]) -> CliResult<Self> {
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let bad = || CliError::format(path, "malformed token stream");
        if !bytes.len().is_multiple_of(4) || words.len() < 3 {
            return Err(bad());
        }
        let (wl, nw, np) = (words[0] as usize, words[1] as usize, words[2] as usize);
        if words.len() != 3 + np + nw * wl {
            return Err(bad());
        }
        let positions: Vec<usize> = words[3..3 + np].iter().map(|&p| p as usize).collect();
        if positions.iter().any(|&p| p >= wl) {
            return Err(bad());
        }
        let windows = words[3 + np..].chunks(wl.max(1)).map(|c| c.to_vec()).take(nw).collect();
        Ok(Self {
            window_len: wl,
            windows,
            positions,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Rows per shard so that each shard's payload stays within `shard_bytes`.
pub fn rows_per_shard(d: usize, shard_bytes: usize) -> usize {
    (shard_bytes / (4 * d.max(1))).max(1)
}

/// Writes a shard set for one model; the normalization scale is computed
/// over the whole table.
pub fn write_set(
    dir: &Path,
    model_id: &str,
    layer_index: usize,
    table: &ActivationTable,
    tokens: &TokenStream,
    shard_bytes: usize,
) -> CliResult<Manifest> {
    if table.rows() != tokens.rows() {
        return Err(CliError::Config(format!(
            "{} activation rows for {} captured tokens",
            table.rows(),
            tokens.rows()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let scale = normalization_scale(&[table])?;
    let hash = tokens.hash();
    let d = table.cols();
    let per = rows_per_shard(d, shard_bytes);
    let mut shards = Vec::new();
    let mut start = 0;
    while start < table.rows() {
        let end = (start + per).min(table.rows());
        let file = format!("shard_{:04}.xact", shards.len());
        let path = dir.join(&file);
        let header = ShardHeader {
            model_id: model_id.into(),
            layer_index,
            d,
            n_tokens: end - start,
            normalization_scale: scale,
            token_stream_hash: hash.clone(),
            shard_index: shards.len(),
            first_row: start,
        };
        let mut w = Writer::create(&path, MAGIC, VERSION, &header)?;
        w.f32s(table.data()[start * d..end * d].iter().copied())?;
        w.finish()?;
        shards.push(ShardEntry {
            file,
            n_tokens: end - start,
            sha256: sha256_file(&path)?,
        });
        start = end;
    }
    let tok_path = dir.join("tokens.bin");
    crate::binio::write_file(&tok_path, &tokens.encode())?;
    let manifest = Manifest {
        model_id: model_id.into(),
        layer_index,
        d,
        n_tokens: table.rows(),
        normalization_scale: scale,
        token_stream_hash: hash,
        window_len: tokens.window_len,
        shards,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A loaded shard set.
#[derive(Clone, Debug)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub table: ActivationTable,
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn read_tokens(dir: &Path) -> CliResult<TokenStream> {
    let p = dir.join("tokens.bin");
    let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
    TokenStream::decode(&p, &bytes)
}

/// Loads every shard listed in the manifest, checking headers against it.
pub fn read_set(dir: &Path) -> CliResult<ShardSet> {
    let manifest = read_manifest(dir)?;
    let mut data = Vec::with_capacity(manifest.n_tokens * manifest.d);
    for (i, entry) in manifest.shards.iter().enumerate() {
        let path = dir.join(&entry.file);
        let (mut r, version, h): (_, _, ShardHeader) = Reader::open(&path, MAGIC)?;
        if version != VERSION {
            return Err(CliError::format(&path, format!("unsupported shard version {version}")));
        }
        if h.token_stream_hash != manifest.token_stream_hash {
            return Err(CliError::Pairing(format!(
                "{} carries token hash {} but its manifest says {}",
                path.display(),
                h.token_stream_hash,
                manifest.token_stream_hash
            )));
        }
        if h.d != manifest.d || h.n_tokens != entry.n_tokens || h.shard_index != i || h.model_id != manifest.model_id {
            return Err(CliError::format(&path, "shard header disagrees with manifest"));
        }
        if r.remaining() != (h.n_tokens * h.d * 4) as u64 {
            return Err(CliError::format(&path, "file length does not match header"));
        }
        data.extend(r.f32s(h.n_tokens * h.d)?);
        r.expect_end()?;
    }
    if data.len() != manifest.n_tokens * manifest.d {
        return Err(CliError::format(dir, "shard rows do not add up to the manifest count"));
    }
    let table = ActivationTable::from_data(manifest.d, data)?;
    Ok(ShardSet {
        dir: dir.to_path_buf(),
        manifest,
        table,
    })
}

/// Refuses sets captured on different token streams.
pub fn check_paired(a: &Manifest, b: &Manifest) -> CliResult<()> {
    if a.token_stream_hash != b.token_stream_hash || a.n_tokens != b.n_tokens {
        return Err(CliError::Pairing(format!(
            "{} ({} tokens, hash {}) vs {} ({} tokens, hash {})",
            a.model_id, a.n_tokens, a.token_stream_hash, b.model_id, b.n_tokens, b.token_stream_hash
        )));
    }
    if a.layer_index != b.layer_index {
        return Err(CliError::Pairing(format!(
            "{} captured at layer {} but {} at layer {}",
            a.model_id, a.layer_index, b.model_id, b.layer_index
        )));
    }
    Ok(())
}

/// Paired, normalized activations from two shard sets.
pub fn load_paired(dir_a: &Path, dir_b: &Path) -> CliResult<PairedActivations> {
    let a = read_set(dir_a)?;
    let b = read_set(dir_b)?;
    check_paired(&a.manifest, &b.manifest)?;
    Ok(PairedActivations::new(
        a.table,
        b.table,
        a.manifest.normalization_scale,
        b.manifest.normalization_scale,
    )?)
}
