// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, corpus handling, activation capture, reports and the
//! command-line pipeline on top of `xcdiff-core`.

pub mod binio;
pub mod capture;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod lm_ckpt;
pub mod report;
pub mod shards;
pub mod xc_ckpt;

pub use error::{CliError, CliResult};
