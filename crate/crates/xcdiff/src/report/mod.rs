// SPDX-License-Identifier: MIT OR Apache-2.0

//! `report.json` and the figures derived from it. Rendering reads nothing
//! but the report, so `xcdiff report` reproduces the CSV and SVG files
//! byte for byte.

pub mod svg;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xcdiff_core::activations::PairedActivations;
use xcdiff_core::analysis::{summarize, Category, FeatureReport, Summary, DENSE_ONLY_ABOVE, MOE_ONLY_BELOW};
use xcdiff_core::crosscoder::{CrosscoderParams, XcMetrics};
use xcdiff_core::synth::{RecoveryMetrics, SynthThresholds};

use crate::binio::{write_file, write_json};
use crate::error::{CliError, CliResult};
use crate::xc_ckpt::Provenance;
use svg::{headroom, Chart, PALETTE};

pub const REPORT_FILE: &str = "report.json";
pub const FIGURES: [&str; 5] = ["delta_norm", "decoder_cosine", "density", "category_counts", "fve_curve"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub fve_dense: f64,
    pub fve_moe: f64,
}

/// Planted-dictionary results attached to a synthetic run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSection {
    pub seed: u64,
    pub recovery: RecoveryMetrics,
    pub thresholds: SynthThresholds,
    pub planted_coherence: (f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub source: Option<Provenance>,
    pub summary: Summary,
    pub fve_curve: Vec<CurvePoint>,
    pub synthetic: Option<SyntheticSection>,
    pub features: FeatureReport,
}

/// Held-out FVE points from a metrics log, in step order.
pub fn fve_curve(metrics: &[XcMetrics]) -> Vec<CurvePoint> {
    metrics
        .iter()
        .filter_map(|m| {
            Some(CurvePoint {
                step: m.step,
                fve_dense: m.fve_a?,
                fve_moe: m.fve_b?,
            })
        })
        .collect()
}

impl Report {
    pub fn from_features(kind: &str, features: FeatureReport, metrics: &[XcMetrics], source: Option<Provenance>) -> Self {
        Self {
            kind: kind.into(),
            source,
            summary: summarize(&features),
            fve_curve: fve_curve(metrics),
            synthetic: None,
            features,
        }
    }

    /// Analyzes `params` on `eval`. The trainer's L0 is taken from the last
    /// metrics record.
    pub fn build(
        kind: &str,
        params: &CrosscoderParams,
        eval: &PairedActivations,
        metrics: &[XcMetrics],
        source: Option<Provenance>,
    ) -> CliResult<Self> {
        let features = FeatureReport::build(params, eval, metrics.last().map(|m| m.l0))?;
        Ok(Self::from_features(kind, features, metrics, source))
    }
}

/// Writes `report.json` and renders the figures next to it.
pub fn write_report(dir: &Path, report: &Report) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join(REPORT_FILE), report)?;
    render(dir, report)
}

/// Emits `<figure>.csv` and `<figure>.svg` for every figure plus `features.csv`.
pub fn render(dir: &Path, r: &Report) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let out = [
        ("delta_norm", delta_csv(r), delta_svg(r)),
        ("decoder_cosine", cosine_csv(r), cosine_svg(r)),
        ("density", density_csv(r), density_svg(r)),
        ("category_counts", counts_csv(r), counts_svg(r)),
        ("fve_curve", curve_csv(r), curve_svg(r)),
    ];
    for (name, csv, svg) in out {
        write_file(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
        write_file(&dir.join(format!("{name}.svg")), svg.as_bytes())?;
    }
    write_file(&dir.join("features.csv"), features_csv(r).as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn features_csv(r: &Report) -> String {
    let mut s = String::from("feature,delta_norm,category,decoder_cosine,density,designated_shared,dead,norm_dense,norm_moe\n");
    for f in &r.features.features {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            f.index,
            f.delta_norm,
            f.category.name(),
            opt(f.decoder_cosine),
            f.density,
            f.designated_shared,
            f.dead,
            f.norm_dense,
            f.norm_moe
        );
    }
    s
}

fn hist_csv(h: &xcdiff_core::analysis::Histogram) -> String {
    let e = h.edges();
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", e[i], e[i + 1]);
    }
    s
}

fn delta_csv(r: &Report) -> String {
    hist_csv(&r.summary.delta_hist)
}

fn cosine_csv(r: &Report) -> String {
    hist_csv(&r.summary.cosine_hist)
}

fn density_csv(r: &Report) -> String {
    let d = &r.summary.density;
    let e = d[0].log10_hist.edges();
    let mut s = String::from("log10_lo,log10_hi");
    for c in d {
        let _ = write!(s, ",{}", c.category.name());
    }
    s.push('\n');
    for i in 0..d[0].log10_hist.counts.len() {
        let _ = write!(s, "{},{}", e[i], e[i + 1]);
        for c in d {
            let _ = write!(s, ",{}", c.log10_hist.counts[i]);
        }
        s.push('\n');
    }
    s.push_str("zero_density,");
    for c in d {
        let _ = write!(s, ",{}", c.zero_density);
    }
    s.push('\n');
    s
}

fn counts_csv(r: &Report) -> String {
    let sm = &r.summary;
    let mut s = String::from("category,count,undesignated,active,reference\n");
    for c in Category::ALL {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.name(),
            sm.counts.get(c),
            sm.undesignated_counts.get(c),
            sm.active_counts.get(c),
            sm.reference.counts.get(c)
        );
    }
    s
}

fn curve_csv(r: &Report) -> String {
    let mut s = String::from("step,fve_dense,fve_moe\n");
    for p in &r.fve_curve {
        let _ = writeln!(s, "{},{},{}", p.step, p.fve_dense, p.fve_moe);
    }
    s
}

fn hist_max(counts: &[u64]) -> f64 {
    counts.iter().copied().max().unwrap_or(0) as f64
}

fn delta_svg(r: &Report) -> String {
    let h = &r.summary.delta_hist;
    let e = h.edges();
    let mut c = Chart::new(
        "Relative decoder norm (0 = MoE only, 1 = dense only)",
        "delta_norm",
        "features",
        (0.0, 1.0),
        (0.0, headroom(hist_max(&h.counts))),
    );
    c.band(0.0, MOE_ONLY_BELOW, PALETTE[0]);
    c.band(DENSE_ONLY_ABOVE, 1.0, PALETTE[2]);
    for (i, &n) in h.counts.iter().enumerate() {
        c.bar(e[i], e[i + 1], n as f64, PALETTE[1]);
    }
    c.vline(MOE_ONLY_BELOW, "#000", "0.3");
    c.vline(DENSE_ONLY_ABOVE, "#000", "0.7");
    let sm = &r.summary;
    c.legend(&format!("moe_only {}", sm.counts.moe_only), PALETTE[0]);
    c.legend(&format!("shared {}", sm.counts.shared), PALETTE[1]);
    c.legend(&format!("dense_only {}", sm.counts.dense_only), PALETTE[2]);
    c.finish()
}

fn cosine_svg(r: &Report) -> String {
    let h = &r.summary.cosine_hist;
    let e = h.edges();
    let mut c = Chart::new(
        "Decoder cosine similarity between models",
        "cosine",
        "features",
        (h.lo, h.hi),
        (0.0, headroom(hist_max(&h.counts))),
    );
    for (i, &n) in h.counts.iter().enumerate() {
        c.bar(e[i], e[i + 1], n as f64, PALETTE[1]);
    }
    if let Some(m) = r.summary.designated_min_cosine {
        c.vline(m, PALETTE[0], &format!("designated min {m:.6}"));
    }
    c.finish()
}

fn density_svg(r: &Report) -> String {
    let d = &r.summary.density;
    let h0 = &d[0].log10_hist;
    let e = h0.edges();
    let top = d.iter().map(|x| hist_max(&x.log10_hist.counts)).fold(0.0, f64::max);
    let mut c = Chart::new(
        "Feature density by category",
        "log10 density",
        "features",
        (h0.lo, h0.hi),
        (0.0, headroom(top)),
    );
    for (i, cat) in d.iter().enumerate() {
        let counts: Vec<f64> = cat.log10_hist.counts.iter().map(|&n| n as f64).collect();
        c.steps(&e, &counts, PALETTE[i]);
        c.legend(&format!("{} ({} at zero)", cat.category.name(), cat.zero_density), PALETTE[i]);
    }
    c.finish()
}

fn counts_svg(r: &Report) -> String {
    let sm = &r.summary;
    let top = Category::ALL.iter().map(|&k| sm.counts.get(k)).max().unwrap_or(0) as f64;
    let mut c = Chart::new(
        "Features per delta_norm band",
        "moe_only | shared | dense_only",
        "features",
        (0.0, 3.0),
        (0.0, headroom(top)),
    );
    for (i, k) in Category::ALL.into_iter().enumerate() {
        let x = i as f64;
        c.bar(x + 0.15, x + 0.85, sm.counts.get(k) as f64, PALETTE[i]);
        c.text_at(x + 0.5, sm.counts.get(k) as f64, &sm.counts.get(k).to_string());
        c.bar(x + 0.35, x + 0.65, sm.active_counts.get(k) as f64, PALETTE[3]);
        c.legend(&format!("{} (reference {})", k.name(), sm.reference.counts.get(k)), PALETTE[i]);
    }
    c.legend("fired on eval", PALETTE[3]);
    c.finish()
}

fn curve_svg(r: &Report) -> String {
    let last = r.fve_curve.last().map_or(1, |p| p.step.max(1)) as f64;
    let lo = r
        .fve_curve
        .iter()
        .flat_map(|p| [p.fve_dense, p.fve_moe])
        .fold(0.0, f64::min)
        .max(-1.0);
    let mut c = Chart::new(
        "Held-out fraction of variance explained",
        "training step",
        "FVE",
        (0.0, last),
        (lo, 1.0),
    );
    let dense: Vec<(f64, f64)> = r.fve_curve.iter().map(|p| (p.step as f64, p.fve_dense.max(lo))).collect();
    let moe: Vec<(f64, f64)> = r.fve_curve.iter().map(|p| (p.step as f64, p.fve_moe.max(lo))).collect();
    c.polyline(&dense, PALETTE[2], true);
    c.polyline(&moe, PALETTE[0], true);
    c.hline(r.summary.reference.fve, PALETTE[3], &format!("reference {}", r.summary.reference.fve));
    c.legend("dense", PALETTE[2]);
    c.legend("moe", PALETTE[0]);
    c.finish()
}
