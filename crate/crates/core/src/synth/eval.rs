// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::matching::{match_features, recovery_metrics, RecoveryMetrics};
use super::planted::{PlantedConfig, PlantedDictionary};
use crate::activations::{normalization_scale, PairedActivations};
use crate::analysis::{summarize, FeatureReport, Summary};
use crate::crosscoder::{train_crosscoder, CrosscoderParams, Variant, XcMetrics, XcTrainConfig};
use crate::linalg::AdamConfig;
use crate::Result;

const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthThresholds {
    /// Matching score that counts a planted feature as recovered.
    pub match_score: f64,
    pub recovery_rate: f64,
    pub accuracy: f64,
    pub fve: f64,
}

impl Default for SynthThresholds {
    fn default() -> Self {
        Self {
            match_score: 0.9,
            recovery_rate: 0.85,
            accuracy: 0.90,
            fve: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthEvalConfig {
    pub seed: u64,
    pub planted: PlantedConfig,
    pub crosscoder: XcTrainConfig,
    pub thresholds: SynthThresholds,
}

impl Default for SynthEvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            planted: PlantedConfig::default(),
            crosscoder: XcTrainConfig {
                variant: Variant::BatchTopk,
                n_features: Some(256),
                n_shared: 64,
                l0_target: 8,
                steps: 12_000,
                batch_size: 2048,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                eval_interval: 2000,
                eval_rows: 8192,
                ..XcTrainConfig::default()
            },
            thresholds: SynthThresholds::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutcome {
    pub dictionary: PlantedDictionary,
    pub params: CrosscoderParams,
    pub train_metrics: XcMetrics,
    pub recovery: RecoveryMetrics,
    pub assignment: Vec<Option<(usize, f64)>>,
    pub report: FeatureReport,
    pub summary: Summary,
    pub coherence: (f64, f64),
    pub scales: (f64, f64),
    pub passed: bool,
}

/// Generate, normalize, train, match and score. The crosscoder seed is the
/// run seed so one number pins the whole run.
pub fn run_synth_eval(cfg: &SynthEvalConfig, sink: &mut dyn FnMut(&XcMetrics)) -> Result<SynthOutcome> {
    let dict = PlantedDictionary::generate(&cfg.planted, cfg.seed)?;
    let train = dict.sample(cfg.planted.samples, TRAIN_STREAM)?.data;
    let eval = dict.sample(cfg.planted.eval_samples.max(1), EVAL_STREAM)?.data;
    let scale_a = normalization_scale(&[&train.a])?;
    let scale_b = normalization_scale(&[&train.b])?;
    let train = PairedActivations::new(train.a, train.b, scale_a, scale_b)?;
    let eval = PairedActivations::new(eval.a, eval.b, scale_a, scale_b)?;

    let xc = XcTrainConfig {
        seed: cfg.seed,
        ..cfg.crosscoder.clone()
    };
    let (params, train_metrics) = train_crosscoder(&xc, &train, Some(&eval), sink)?;
    let assignment = match_features(&params, &dict)?;
    let recovery = recovery_metrics(&assignment, &params, &dict, cfg.thresholds.match_score)?;
    let report = FeatureReport::build(&params, &eval, Some(train_metrics.l0))?;
    let summary = summarize(&report);
    let t = &cfg.thresholds;
    let passed = recovery.rate >= t.recovery_rate
        && recovery.accuracy >= t.accuracy
        && report.fve_dense >= t.fve
        && report.fve_moe >= t.fve;
    Ok(SynthOutcome {
        coherence: dict.coherence(),
        dictionary: dict,
        params,
        train_metrics,
        recovery,
        assignment,
        report,
        summary,
        scales: (scale_a, scale_b),
        passed,
    })
}
