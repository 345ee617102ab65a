// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration. Every section except `seed` has defaults; relative
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xcdiff_core::crosscoder::XcTrainConfig;
use xcdiff_core::lm::{Arch, LmConfig, LmTrainConfig};
use xcdiff_core::synth::SynthEvalConfig;

use crate::capture::CaptureConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub shards: PathBuf,
    pub crosscoder: PathBuf,
    pub report: PathBuf,
    pub synth: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus".into(),
            checkpoints: "runs/ckpt".into(),
            shards: "runs/shards".into(),
            crosscoder: "runs/xc".into(),
            report: "runs/report".into(),
            synth: "runs/synth".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.checkpoints,
            &mut self.shards,
            &mut self.crosscoder,
            &mut self.report,
            &mut self.synth,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub bytes_per_domain: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            bytes_per_domain: crate::corpus::DEFAULT_BYTES_PER_DOMAIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Shared by both subject models; `arch` is set per command.
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub lm_train: LmTrainConfig,
    #[serde(default)]
    pub capture: CaptureConfig,
    #[serde(default)]
    pub crosscoder: XcTrainConfig,
    #[serde(default)]
    pub synth: SynthEvalConfig,
}

impl RunConfig {
    /// Reads `path`, resolves paths against its directory, and applies a
    /// seed override to every seeded component.
    pub fn load(path: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::json(path, e))?;
        let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        cfg.paths.resolve(&base);
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.crosscoder.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.lm.with_arch(Arch::Dense).validate()?;
        cfg.lm.with_arch(Arch::Moe).validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_overridable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(RunConfig::load(&p, None).unwrap_err().exit_code(), 2);

        std::fs::write(&p, r#"{"seed": 5, "paths": {"corpus": "c", "report": "/abs"}}"#).unwrap();
        let c = RunConfig::load(&p, None).unwrap();
        assert_eq!(c.crosscoder.seed, 5);
        assert_eq!(c.paths.corpus, dir.path().join("c"));
        assert_eq!(c.paths.report, PathBuf::from("/abs"));
        let c = RunConfig::load(&p, Some(9)).unwrap();
        assert_eq!((c.seed, c.crosscoder.seed, c.synth.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_sections_and_bad_models_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 1, "lm_trian": {}}"#).unwrap();
        assert!(RunConfig::load(&p, None).is_err());
        std::fs::write(&p, r#"{"seed": 1, "lm": {"d_model": 63}}"#).unwrap();
        assert_eq!(RunConfig::load(&p, None).unwrap_err().exit_code(), 2);
    }
}
