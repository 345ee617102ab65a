// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Each one reads its inputs, writes its
//! outputs and returns; nothing is shared between commands except files.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xcdiff_core::crosscoder::{train_crosscoder, Variant, XcMetrics};
use xcdiff_core::lm::{train_lm, Arch, LmEvent};
use xcdiff_core::synth::run_synth_eval;
use xcdiff_core::Matrix;

use crate::capture::{capture_model, CaptureOutput};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, write_corpus, CorpusManifest};
use crate::error::{CliError, CliResult};
use crate::report::{write_report, Report, SyntheticSection, REPORT_FILE};
use crate::shards::{check_paired, load_paired, read_manifest};
use crate::xc_ckpt::{self, Provenance, XcCheckpoint};
use crate::{binio, lm_ckpt};

pub const XC_FILE: &str = "crosscoder.xcxc";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// JSON-lines writer that creates its parent directory.
struct JsonLines {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonLines {
    fn create(path: &Path) -> CliResult<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.into(),
            out: std::io::BufWriter::new(f),
        })
    }

    fn push(&mut self, v: &impl Serialize) -> CliResult<()> {
        serde_json::to_writer(&mut self.out, v).map_err(|e| CliError::json(&self.path, e))?;
        writeln!(self.out).map_err(|e| CliError::io(&self.path, e))
    }

    fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn corpus(out: &Path, seed: u64, bytes_per_domain: usize) -> CliResult<CorpusManifest> {
    let m = write_corpus(out, seed, bytes_per_domain)?;
    for f in &m.files {
        eprintln!("corpus: {} {} bytes", f.file, f.bytes);
    }
    Ok(m)
}

pub fn arch_name(arch: Arch) -> &'static str {
    match arch {
        Arch::Dense => "dense",
        Arch::Moe => "moe",
    }
}

#[derive(Serialize)]
struct LmDone<'a> {
    event: &'static str,
    arch: &'static str,
    steps: u64,
    initial_loss: f64,
    final_loss: f64,
    epoch_mean_ce: &'a [f64],
    train_tokens: usize,
    /// Per MoE layer, tokens routed to each expert during the last epoch.
    expert_usage: &'a [Vec<u64>],
    /// Per MoE layer, max/min expert token count.
    usage_ratio: Vec<Option<f64>>,
}

/// Trains one subject model; writes `<out>` and `<out stem>.log.jsonl`.
pub fn lm_train(cfg: &RunConfig, arch: Arch, out: Option<PathBuf>, corpus_dir: Option<PathBuf>) -> CliResult<PathBuf> {
    let name = arch_name(arch);
    let out = out.unwrap_or_else(|| cfg.paths.checkpoints.join(format!("{name}.xclm")));
    let corpus = load_corpus(&corpus_dir.unwrap_or_else(|| cfg.paths.corpus.clone()))?;
    let config = cfg.lm.with_arch(arch);
    let windows = corpus.train_windows(config.context_length);
    let log_path = out.with_extension("log.jsonl");
    let mut log = JsonLines::create(&log_path)?;
    let mut io_err = None;
    let ckpt = train_lm(&config, &cfg.lm_train, &windows, cfg.seed, |ev| {
        if let LmEvent::Log { step, ce, .. } = ev {
            eprintln!("lm-train {name}: step {step} ce {ce:.4}");
        }
        if let Err(e) = log.push(ev) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let usage_ratio = ckpt
        .meta
        .expert_usage
        .iter()
        .map(|u| {
            let (lo, hi) = (u.iter().min()?, u.iter().max()?);
            (*lo > 0).then(|| *hi as f64 / *lo as f64)
        })
        .collect();
    log.push(&LmDone {
        event: "done",
        arch: name,
        steps: ckpt.meta.steps,
        initial_loss: ckpt.meta.initial_loss,
        final_loss: ckpt.meta.final_loss,
        epoch_mean_ce: &ckpt.meta.epoch_mean_ce,
        train_tokens: windows.total_tokens(),
        expert_usage: &ckpt.meta.expert_usage,
        usage_ratio,
    })?;
    log.finish()?;
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    lm_ckpt::save(&out, &ckpt)?;
    eprintln!(
        "lm-train {name}: {} steps, final ce {:.4}, wrote {}",
        ckpt.meta.steps,
        ckpt.meta.final_loss,
        out.display()
    );
    Ok(out)
}

/// Model id used in shard headers: the checkpoint file stem.
pub fn model_id(ckpt: &Path) -> String {
    ckpt.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn capture(
    cfg: &RunConfig,
    model: &Path,
    corpus_dir: Option<PathBuf>,
    layer: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult<CaptureOutput> {
    let ckpt = lm_ckpt::load(model)?;
    let corpus = load_corpus(&corpus_dir.unwrap_or_else(|| cfg.paths.corpus.clone()))?;
    let id = model_id(model);
    let out = out.unwrap_or_else(|| cfg.paths.shards.join(&id));
    let mut ccfg = cfg.capture.clone();
    if let Some(l) = layer {
        ccfg.layer = l;
    }
    let res = capture_model(&ckpt.params, &id, &corpus, &ccfg, &out)?;
    eprintln!(
        "capture {id}: layer {} train {} tokens ({} shards), eval {} tokens, hash {}",
        ccfg.layer,
        res.train.n_tokens,
        res.train.shards.len(),
        res.eval.n_tokens,
        res.train.token_stream_hash
    );
    Ok(res)
}

fn progress(tag: &str, m: &XcMetrics) {
    match (m.fve_a, m.fve_b) {
        (Some(a), Some(b)) => eprintln!(
            "{tag}: step {} loss {:.4} l0 {:.2} dead {} fve {a:.4}/{b:.4}",
            m.step, m.total, m.l0, m.dead_features
        ),
        _ => eprintln!("{tag}: step {} loss {:.4} l0 {:.2} dead {}", m.step, m.total, m.l0, m.dead_features),
    }
}

/// Trains a crosscoder on `a/train` and `b/train` with held-out FVE on the
/// eval splits; writes the checkpoint and `metrics.jsonl` into `out`.
pub fn xc_train(cfg: &RunConfig, a: &Path, b: &Path, variant: Option<Variant>, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let out = out.unwrap_or_else(|| cfg.paths.crosscoder.clone());
    let (ma, mb) = (read_manifest(&a.join("train"))?, read_manifest(&b.join("train"))?);
    check_paired(&ma, &mb)?;
    for (m, dir) in [(&ma, a), (&mb, b)] {
        let e = read_manifest(&dir.join("eval"))?;
        if e.model_id != m.model_id || e.layer_index != m.layer_index {
            return Err(CliError::Pairing(format!(
                "{}: eval split holds {} layer {}, train split {} layer {}",
                dir.display(),
                e.model_id,
                e.layer_index,
                m.model_id,
                m.layer_index
            )));
        }
    }
    let train = load_paired(&a.join("train"), &b.join("train"))?;
    let eval = load_paired(&a.join("eval"), &b.join("eval"))?;
    // Held-out rows use the training scales.
    let eval = xcdiff_core::activations::PairedActivations::new(eval.a, eval.b, train.scale_a, train.scale_b)?;
    let mut tcfg = cfg.crosscoder.clone();
    if let Some(v) = variant {
        tcfg.variant = v;
    }
    let mut log = JsonLines::create(&out.join(METRICS_FILE))?;
    let mut io_err = None;
    let (params, last) = train_crosscoder(&tcfg, &train, Some(&eval), &mut |m| {
        progress("xc-train", m);
        if let Err(e) = log.push(m) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log.finish()?;
    let path = out.join(XC_FILE);
    xc_ckpt::save(
        &path,
        &XcCheckpoint {
            params,
            train: tcfg,
            source: Provenance {
                model_a: ma.model_id,
                model_b: mb.model_id,
                layer_index: ma.layer_index,
                scale_a: train.scale_a,
                scale_b: train.scale_b,
                token_stream_hash: ma.token_stream_hash,
            },
        },
    )?;
    eprintln!(
        "xc-train: {} steps, fve {:?}/{:?}, wrote {}",
        last.step,
        last.fve_a,
        last.fve_b,
        path.display()
    );
    Ok(path)
}

/// Reads a metrics log written by `xc-train`.
pub fn read_metrics(path: &Path) -> CliResult<Vec<XcMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::json(path, e)))
        .collect()
}

/// Per-feature analysis of a trained crosscoder on held-out shards. The
/// metrics log next to the checkpoint, if any, supplies the FVE curve.
pub fn analyze(xc: &Path, eval_a: &Path, eval_b: &Path, out: &Path) -> CliResult<Report> {
    let ckpt = xc_ckpt::load_trained(xc)?;
    let (ma, mb) = (read_manifest(eval_a)?, read_manifest(eval_b)?);
    check_paired(&ma, &mb)?;
    if ma.model_id != ckpt.source.model_a || mb.model_id != ckpt.source.model_b {
        return Err(CliError::Pairing(format!(
            "crosscoder was trained on {} / {} but eval shards come from {} / {}",
            ckpt.source.model_a, ckpt.source.model_b, ma.model_id, mb.model_id
        )));
    }
    if ma.layer_index != ckpt.source.layer_index || ma.d != ckpt.params.d_a() || mb.d != ckpt.params.d_b() {
        return Err(CliError::Pairing(format!(
            "crosscoder expects layer {} with dims {}/{}, eval shards hold layer {} with dims {}/{}",
            ckpt.source.layer_index,
            ckpt.params.d_a(),
            ckpt.params.d_b(),
            ma.layer_index,
            ma.d,
            mb.d
        )));
    }
    let eval = load_paired(eval_a, eval_b)?;
    let eval = xcdiff_core::activations::PairedActivations::new(eval.a, eval.b, ckpt.source.scale_a, ckpt.source.scale_b)?;
    let metrics_path = xc.with_file_name(METRICS_FILE);
    let metrics = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    let report = Report::build("desk", &ckpt.params, &eval, &metrics, Some(ckpt.source))?;
    write_report(out, &report)?;
    let s = &report.summary;
    eprintln!(
        "analyze: fve {:.4}/{:.4}, moe_only {} shared {} dense_only {}, inactive {}, designated cosine all 1.0: {}",
        s.fve_dense,
        s.fve_moe,
        s.counts.moe_only,
        s.counts.shared,
        s.counts.dense_only,
        s.inactive_features,
        s.designated_cosine_all_one
    );
    Ok(report)
}

/// Re-renders figures and CSVs from a saved report.
pub fn report(input: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let r: Report = binio::read_json(input)?;
    let dir = out.unwrap_or_else(|| input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    crate::report::render(&dir, &r)
}

#[derive(Serialize)]
struct Truth<'a> {
    seed: u64,
    config: &'a xcdiff_core::synth::PlantedConfig,
    categories: Vec<&'static str>,
    dirs_a: Vec<Vec<f32>>,
    dirs_b: Vec<Vec<f32>>,
}

fn rows_f32(m: &Matrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&x| x as f32).collect()).collect()
}

/// Outcome of `synth-eval`: the report plus per-threshold verdicts.
pub struct SynthResult {
    pub report: Report,
    pub checks: Vec<(String, f64, f64, bool)>,
    pub passed: bool,
}

/// Planted-dictionary run: truth, crosscoder, metrics and report under `out`.
pub fn synth_eval(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<SynthResult> {
    let out = out.unwrap_or_else(|| cfg.paths.synth.clone());
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut metrics = Vec::new();
    let outcome = run_synth_eval(&cfg.synth, &mut |m| {
        progress("synth-eval", m);
        metrics.push(m.clone());
    })?;
    let dict = &outcome.dictionary;
    binio::write_json(
        &out.join("truth.json"),
        &Truth {
            seed: dict.seed,
            config: &dict.config,
            categories: dict.categories().iter().map(|c| c.name()).collect(),
            dirs_a: rows_f32(&dict.dirs_a),
            dirs_b: rows_f32(&dict.dirs_b),
        },
    )?;
    let mut log = JsonLines::create(&out.join(METRICS_FILE))?;
    for m in &metrics {
        log.push(m)?;
    }
    log.finish()?;
    let xc_cfg = xcdiff_core::crosscoder::XcTrainConfig {
        seed: cfg.synth.seed,
        ..cfg.synth.crosscoder.clone()
    };
    xc_ckpt::save(
        &out.join(XC_FILE),
        &XcCheckpoint {
            params: outcome.params.clone(),
            train: xc_cfg,
            source: Provenance {
                model_a: "planted_a".into(),
                model_b: "planted_b".into(),
                layer_index: 0,
                scale_a: outcome.scales.0,
                scale_b: outcome.scales.1,
                token_stream_hash: String::new(),
            },
        },
    )?;
    let t = cfg.synth.thresholds;
    let mut report = Report::from_features("synthetic", outcome.report.clone(), &metrics, None);
    report.synthetic = Some(SyntheticSection {
        seed: cfg.synth.seed,
        recovery: outcome.recovery.clone(),
        thresholds: t,
        planted_coherence: outcome.coherence,
        passed: outcome.passed,
    });
    write_report(&out.join("report"), &report)?;
    let r = &outcome.recovery;
    let checks = vec![
        ("recovery_rate".to_string(), r.rate, t.recovery_rate, r.rate >= t.recovery_rate),
        ("accuracy".to_string(), r.accuracy, t.accuracy, r.accuracy >= t.accuracy),
        ("fve_dense".to_string(), report.summary.fve_dense, t.fve, report.summary.fve_dense >= t.fve),
        ("fve_moe".to_string(), report.summary.fve_moe, t.fve, report.summary.fve_moe >= t.fve),
    ];
    Ok(SynthResult {
        report,
        checks,
        passed: outcome.passed,
    })
}

/// Path of the report written by `analyze` into `dir`.
pub fn report_path(dir: &Path) -> PathBuf {
    dir.join(REPORT_FILE)
}
