// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared container layout: 4-byte magic, `u32` version, `u32`-length JSON
//! header, then a payload. Integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use xcdiff_core::Matrix;

use crate::error::{CliError, CliResult};

pub struct Writer {
    inner: BufWriter<File>,
    path: std::path::PathBuf,
}

impl Writer {
    pub fn create(path: &Path, magic: &[u8; 4], version: u32, header: &impl Serialize) -> CliResult<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            inner: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        let json = serde_json::to_vec(header).map_err(|e| CliError::json(path, e))?;
        let len = u32::try_from(json.len()).map_err(|_| CliError::format(path, "header too large"))?;
        w.bytes(magic)?;
        w.bytes(&version.to_le_bytes())?;
        w.bytes(&len.to_le_bytes())?;
        w.bytes(&json)?;
        Ok(w)
    }

    pub fn bytes(&mut self, b: &[u8]) -> CliResult<()> {
        self.inner.write_all(b).map_err(|e| CliError::io(&self.path, e))
    }

    pub fn f32s(&mut self, vals: impl IntoIterator<Item = f32>) -> CliResult<()> {
        for v in vals {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// `rows u32, cols u32`, then the entries as f32.
    pub fn matrix(&mut self, m: &Matrix) -> CliResult<()> {
        let dim = |n: usize| u32::try_from(n).map_err(|_| CliError::format(&self.path, "matrix too large"));
        let (r, c) = (dim(m.rows())?, dim(m.cols())?);
        self.bytes(&r.to_le_bytes())?;
        self.bytes(&c.to_le_bytes())?;
        self.f32s(m.data().iter().map(|&v| v as f32))
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub struct Reader {
    inner: BufReader<File>,
    path: std::path::PathBuf,
    remaining: u64,
}

impl Reader {
    /// Opens `path`, checks the magic and returns the version and header.
    pub fn open<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> CliResult<(Self, u32, H)> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let len = file.metadata().map_err(|e| CliError::io(path, e))?.len();
        let mut r = Self {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
            remaining: len,
        };
        let mut m = [0u8; 4];
        r.exact(&mut m)?;
        if &m != magic {
            return Err(CliError::format(
                path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u32()?;
        let hlen = r.u32()? as usize;
        let mut json = vec![0u8; hlen];
        r.exact(&mut json)?;
        let header = serde_json::from_slice(&json).map_err(|e| CliError::json(path, e))?;
        Ok((r, version, header))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn exact(&mut self, buf: &mut [u8]) -> CliResult<()> {
        if (buf.len() as u64) > self.remaining {
            return Err(CliError::format(&self.path, "file truncated"));
        }
        self.inner.read_exact(buf).map_err(|e| CliError::io(&self.path, e))?;
        self.remaining -= buf.len() as u64;
        Ok(())
    }

    pub fn u32(&mut self) -> CliResult<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn f32s(&mut self, n: usize) -> CliResult<Vec<f32>> {
        if (n as u64).saturating_mul(4) > self.remaining {
            return Err(CliError::format(&self.path, "file truncated"));
        }
        let mut raw = vec![0u8; n * 4];
        self.exact(&mut raw)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn matrix(&mut self) -> CliResult<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.f32s(rows * cols)?;
        Ok(Matrix::from_vec(rows, cols, data.into_iter().map(f64::from).collect())?)
    }

    /// Fails unless the whole file has been consumed.
    pub fn expect_end(&self) -> CliResult<()> {
        if self.remaining != 0 {
            return Err(CliError::format(&self.path, format!("{} trailing bytes", self.remaining)));
        }
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::json(path, e))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let m = Matrix::from_rows(&[[1.0, -2.5], [0.125, 3.0]]);
        let mut w = Writer::create(&p, b"TEST", 7, &serde_json::json!({"a": 1})).unwrap();
        w.matrix(&m).unwrap();
        w.finish().unwrap();
        let (mut r, v, h): (_, _, serde_json::Value) = Reader::open(&p, b"TEST").unwrap();
        assert_eq!(v, 7);
        assert_eq!(h["a"], 1);
        assert_eq!(r.matrix().unwrap(), m);
        r.expect_end().unwrap();
        assert!(Reader::open::<serde_json::Value>(&p, b"NOPE").is_err());
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let (mut r, _, _): (_, _, serde_json::Value) = Reader::open(&p, b"TEST").unwrap();
        assert!(r.matrix().is_err());
    }
}
