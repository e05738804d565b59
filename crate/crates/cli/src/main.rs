//! `osrmix` command-line tool.
//!
//! Exit status: 0 on success, 2 for invalid configuration or arguments,
//! 1 for runtime failures (including a matrix with failed members).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use osrmix::config::RunConfig;
use osrmix::experiment::{run_matrix, ExperimentMatrix, SUMMARY_FILE};
use osrmix::metrics::ScoreKind;
use osrmix::pipeline::{self, TrainRequest, FINAL_CHECKPOINT, METRICS_FILE};
use osrmix::report;
use osrmix::Error;

#[derive(Debug, Parser)]
#[command(name = "osrmix", version, about = "Open-set recognition under multi-sample augmentation")]
struct Cli {
    /// TOML run configuration (a matrix file for `matrix`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (an output file for `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the training seed (the seed list for `matrix`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base preset; with --config, replaces the file's `preset` key.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics.jsonl and config.lock.
    Train {
        /// Frozen teacher checkpoint (distillation regimes).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from a milestone checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: accuracy, AUROC and OSCR.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        score: Option<ScoreArg>,
    },
    /// Norms, discrepancy matrix, teacher audit and uncertainty histograms.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Count over-confident and wrong predictions of a teacher on mixed samples.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of mixed samples to inspect.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run every (config × seed) of a matrix file and aggregate the reports.
    Matrix {
        /// Concurrent seeds.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Render report and diagnostic JSON files as text tables (and PNGs with --out).
    Report {
        /// JSON files, or directories whose *.json files are read.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoreArg {
    Mls,
    Uncertainty,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Mls => ScoreKind::Mls,
            ScoreArg::Uncertainty => ScoreKind::NegUncertainty,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> osrmix::Result<RunConfig> {
    let cfg = match (&cli.config, &cli.preset) {
        (Some(path), preset) => RunConfig::load(path, preset.as_deref())?,
        (None, Some(preset)) => RunConfig::from_preset(preset)?,
        (None, None) => return Err(Error::config("--config", "pass --config <file> or --preset <name>")),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> osrmix::Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::config("--out", "this command needs an output directory"))
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Train { teacher, resume } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            say(format!("training {} for {} epochs -> {}", cfg.label(), cfg.train.epochs, out.display()));
            let (outcome, _) = pipeline::train(&TrainRequest {
                config: &cfg,
                teacher: teacher.as_deref(),
                resume: resume.as_deref(),
                out_dir: out,
            })?;
            if let Some(last) = outcome.history.last() {
                say(format!("step {} total loss {:.4}", last.step, last.losses.total));
            }
            say(format!(
                "wrote {} and {}",
                out.join(FINAL_CHECKPOINT).display(),
                out.join(METRICS_FILE).display()
            ));
        }
        Command::Eval { checkpoint, score } => {
            let cfg = load_config(cli)?;
            let report = pipeline::eval(checkpoint, &cfg, score.map(Into::into))?;
            let text = serde_json::to_string_pretty(&report)?;
            match &cli.out {
                Some(path) => {
                    pipeline::write_json(path, &report)?;
                    say(format!("wrote {}", path.display()));
                }
                None => println!("{text}"),
            }
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
            say(format!(
                "accuracy {} AUROC {} OSCR {}",
                pct(Some(report.accuracy)),
                pct(report.auroc),
                pct(report.oscr)
            ));
        }
        Command::Diagnose { checkpoint } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            let d = pipeline::diagnose(checkpoint, &cfg, out)?;
            for p in &d.written {
                say(format!("wrote {}", p.display()));
            }
        }
        Command::Audit { checkpoint, samples } => {
            let mut cfg = load_config(cli)?;
            if let Some(n) = samples {
                cfg.diagnose.audit_samples = *n;
                cfg.validate()?;
            }
            let out = require_out(cli)?;
            let a = pipeline::audit(checkpoint, &cfg, out)?;
            println!(
                "samples {} over-confident {} wrong {} both {}{}",
                a.n_samples,
                a.n_overconfident,
                a.n_wrong,
                a.n_both,
                if a.exhausted { " (stream exhausted)" } else { "" }
            );
        }
        Command::Matrix { workers } => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::config("--config", "matrix needs a matrix file"))?;
            let out = require_out(cli)?;
            let mut matrix = ExperimentMatrix::load(path, cli.preset.as_deref())?;
            if let Some(s) = cli.seed {
                matrix.seeds = vec![s];
            }
            if *workers == 0 {
                return Err(Error::config("--workers", "must be >= 1").into());
            }
            say(format!(
                "{} runs × {} seeds -> {}",
                matrix.runs.len(),
                matrix.seeds.len(),
                out.display()
            ));
            let done = |name: &str, seed: u64, res: &osrmix::Result<osrmix::metrics::EvalReport>| match res {
                Ok(r) => say(format!(
                    "  {name} seed {seed}: accuracy {:.4} AUROC {}",
                    r.accuracy,
                    r.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
                )),
                Err(e) => eprintln!("  {name} seed {seed} failed: {e}"),
            };
            let outcome = run_matrix(&matrix, out, *workers, &done)?;
            say(format!("wrote {}", out.join(SUMMARY_FILE).display()));
            if !outcome.summary.failures.is_empty() {
                eprintln!("{} run(s) failed", outcome.summary.failures.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { inputs } => {
            let files = expand_inputs(inputs)?;
            let docs = report::load_documents(&files)?;
            print!("{}", report::render_text(&docs));
            if let Some(out) = &cli.out {
                for p in report::render_plots(&docs, out)? {
                    say(format!("wrote {}", p.display()));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Directories contribute their `*.json` files in name order.
fn expand_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(anyhow!(Error::config(p.display().to_string(), "no .json files in directory")));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}
