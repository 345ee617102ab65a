// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xcdiff_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("unpaired activations: {0}")]
    Pairing(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 2 config/input, 3 numerical failure, 4 pairing.
    pub fn exit_code(&self) -> i32 {
        use xcdiff_core::Error as E;
        match self {
            CliError::Core(E::NonFinite { .. } | E::Degenerate(_)) => 3,
            CliError::Core(E::Pairing(_)) | CliError::Pairing(_) => 4,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let nan = CliError::from(xcdiff_core::Error::NonFinite {
            what: "loss".into(),
            step: 3,
            lr: 1e-3,
        });
        assert_eq!(nan.exit_code(), 3);
        assert_eq!(CliError::Pairing("x".into()).exit_code(), 4);
        assert_eq!(CliError::from(xcdiff_core::Error::Pairing("x".into())).exit_code(), 4);
        assert_eq!(
            CliError::from(xcdiff_core::Error::LayerRange { layer: 9, n_layers: 5 }).exit_code(),
            2
        );
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    }
}
