// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny end-to-end runs of the binary: exit codes and re-rendering.

use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_xcdiff");

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(args: &[&str]) {
    let (code, err) = run(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "seed": 3,
  "paths": {
    "corpus": "corpus",
    "checkpoints": "ckpt",
    "shards": "shards",
    "crosscoder": "xc",
    "report": "report",
    "synth": "synth"
  },
  "corpus": { "bytes_per_domain": 6000 },
  "lm": {
    "n_layers": 2,
    "d_model": 16,
    "n_heads": 2,
    "d_ff": 32,
    "context_length": 32,
    "moe": { "n_experts": 4, "top_k": 2, "load_balance_alpha": 0.01 }
  },
  "lm_train": { "epochs": 1, "batch_seqs": 8, "warmup_steps": 5, "log_interval": 10 },
  "capture": { "layer": 1 },
  "crosscoder": {
    "n_features": 64,
    "n_shared": 8,
    "l0_target": 4,
    "steps": 60,
    "batch_size": 64,
    "warmup_steps": 5,
    "log_interval": 20,
    "eval_interval": 30,
    "eval_rows": 256
  }
}"#;

#[test]
fn tiny_pipeline_runs_and_rerenders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);

    ok(&["corpus", "--config", c]);
    ok(&["lm-train", "--config", c, "--arch", "dense"]);
    ok(&["lm-train", "--config", c, "--arch", "moe"]);
    let (dense, moe) = (d.join("ckpt/dense.xclm"), d.join("ckpt/moe.xclm"));
    ok(&["capture", "--config", c, "--model", s(&dense)]);
    ok(&["capture", "--config", c, "--model", s(&moe)]);
    let (sa, sb) = (d.join("shards/dense"), d.join("shards/moe"));
    ok(&["xc-train", "--config", c, "--a", s(&sa), "--b", s(&sb)]);
    let xc = d.join("xc/crosscoder.xcxc");
    let report = d.join("report");
    ok(&[
        "analyze",
        "--xc",
        s(&xc),
        "--eval",
        s(&sa.join("eval")),
        s(&sb.join("eval")),
        "--out",
        s(&report),
    ]);

    let r = report.join("report.json");
    let again = d.join("again");
    ok(&["report", "--in", s(&r), "--out", s(&again)]);
    for f in std::fs::read_dir(&report).unwrap() {
        let name = f.unwrap().file_name();
        if name == "report.json" {
            continue;
        }
        let a = std::fs::read(report.join(&name)).unwrap();
        let b = std::fs::read(again.join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs after re-render");
    }

    // Eval sets from a different layer carry a different header.
    let other = d.join("other");
    ok(&["capture", "--config", c, "--model", s(&moe), "--layer", "0", "--out", s(&other)]);
    let (code, err) = run(&[
        "analyze",
        "--xc",
        s(&xc),
        "--eval",
        s(&sa.join("eval")),
        s(&other.join("eval")),
        "--out",
        s(&d.join("bad")),
    ]);
    assert_eq!(code, 4, "{err}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"paths": {}}"#).unwrap();
    assert_eq!(run(&["lm-train", "--config", s(&cfg), "--arch", "dense"]).0, 2);
    std::fs::write(&cfg, r#"{"seed": 0, "lm": {"n_heads": 5}}"#).unwrap();
    assert_eq!(run(&["lm-train", "--config", s(&cfg), "--arch", "moe"]).0, 2);
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["capture", "--config", s(&missing), "--model", "x.xclm"]).0, 2);
    assert_eq!(run(&["--threads", "0", "report", "--in", "r.json"]).0, 2);
}
