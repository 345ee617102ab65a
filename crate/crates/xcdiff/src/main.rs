// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xcdiff::commands;
use xcdiff::config::RunConfig;
use xcdiff::{CliError, CliResult};
use xcdiff_core::crosscoder::Variant;
use xcdiff_core::lm::Arch;

/// Dense-vs-MoE crosscoder diffing pipeline.
///
/// Exit codes: 0 success, 1 synth-eval thresholds not met, 2 configuration
/// or input error, 3 numerical failure, 4 unpaired activation data.
#[derive(Parser)]
#[command(name = "xcdiff", version)]
struct Cli {
    /// Overrides the config seed for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for row-parallel products. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Dense,
    Moe,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    L1,
    SharedL1,
    BatchTopk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the tri-domain corpus.
    Corpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        bytes_per_domain: Option<usize>,
    },
    /// Train a subject model.
    LmTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Capture block outputs of one model on both corpus splits.
    Capture {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// 0-based block index.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a crosscoder on two captured models.
    XcTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Planted-dictionary recovery check.
    SynthEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-feature statistics, report.json and figures.
    Analyze {
        #[arg(long)]
        xc: PathBuf,
        /// Eval shard sets of model A and model B.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        eval: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render figures and CSVs from report.json.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &std::path::Path, seed: Option<u64>) -> CliResult<RunConfig> {
    RunConfig::load(config, seed)
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    xcdiff_core::linalg::set_parallel_rows(cli.threads > 1);

    match cli.command {
        Command::Corpus {
            config,
            out,
            bytes_per_domain,
        } => {
            let cfg = config.map(|c| load(&c, cli.seed)).transpose()?;
            let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).ok_or_else(|| {
                CliError::Config("corpus needs --seed or --config".into())
            })?;
            let out = out
                .or(cfg.as_ref().map(|c| c.paths.corpus.clone()))
                .ok_or_else(|| CliError::Config("corpus needs --out or --config".into()))?;
            let bytes = bytes_per_domain
                .or(cfg.as_ref().map(|c| c.corpus.bytes_per_domain))
                .unwrap_or(xcdiff::corpus::DEFAULT_BYTES_PER_DOMAIN);
            commands::corpus(&out, seed, bytes)?;
        }
        Command::LmTrain {
            config,
            arch,
            out,
            corpus,
        } => {
            let cfg = load(&config, cli.seed)?;
            let arch = match arch {
                ArchArg::Dense => Arch::Dense,
                ArchArg::Moe => Arch::Moe,
            };
            commands::lm_train(&cfg, arch, out, corpus)?;
        }
        Command::Capture {
            config,
            model,
            corpus,
            layer,
            out,
        } => {
            let cfg = load(&config, cli.seed)?;
            commands::capture(&cfg, &model, corpus, layer, out)?;
        }
        Command::XcTrain {
            config,
            a,
            b,
            variant,
            out,
        } => {
            let cfg = load(&config, cli.seed)?;
            let variant = variant.map(|v| match v {
                VariantArg::L1 => Variant::L1,
                VariantArg::SharedL1 => Variant::SharedL1,
                VariantArg::BatchTopk => Variant::BatchTopk,
            });
            commands::xc_train(&cfg, &a, &b, variant, out)?;
        }
        Command::SynthEval { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let res = commands::synth_eval(&cfg, out)?;
            for (name, value, bar, ok) in &res.checks {
                println!("{} {name}: {value:.4} (>= {bar})", if *ok { "PASS" } else { "FAIL" });
            }
            println!("synth-eval: {}", if res.passed { "PASS" } else { "FAIL" });
            if !res.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Analyze { xc, eval, out } => {
            commands::analyze(&xc, &eval[0], &eval[1], &out)?;
        }
        Command::Report { input, out } => {
            commands::report(&input, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
