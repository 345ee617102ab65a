// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired activations drawn from a planted dictionary with known
//! shared/exclusive structure, and recovery scoring of a trained crosscoder.
//!
//! Model A plays the dense role and model B the MoE role, so an A-only
//! planted feature should land in the `dense_only` band.

mod eval;
mod matching;
mod planted;

pub use eval::{run_synth_eval, SynthEvalConfig, SynthOutcome, SynthThresholds};
pub use matching::{assign, assignment_value, match_features, match_scores, recovery_metrics, RecoveryMetrics, EXACT_LIMIT};
pub use planted::{PlantedConfig, PlantedDictionary, PlantedSample};
