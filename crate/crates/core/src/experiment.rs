//! Experiment matrices: named run configs sharing one dataset, executed for
//! every seed, aggregated into per-config mean ± std.
//!
//! Matrix file (TOML):
//!
//! ```toml
//! seeds = [0, 1, 2]
//! [base]
//! preset = "desk-mnist"
//! [[runs]]
//! name = "vanilla"
//! [[runs]]
//! name = "asym"
//! teacher = "vanilla"
//! train = { regime = "asymmetric_distill", augment = { kind = "cutmix" } }
//! ```
//!
//! Each run's remaining keys are merged over `base`. Runs may not override
//! `dataset` or `eval`, so every member shares the split and the protocol.
//! A `teacher` names another run; its final checkpoint for the same seed is
//! used.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{merge_toml, resolve, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, SCHEMA_VERSION};
use crate::pipeline::{self, read_json, write_json, TrainRequest, FINAL_CHECKPOINT, REPORT_FILE};

pub const SUMMARY_FILE: &str = "matrix_summary.json";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    seeds: Vec<u64>,
    #[serde(default)]
    base: Option<toml::Value>,
    runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct RunEntry {
    name: String,
    #[serde(default)]
    teacher: Option<String>,
    #[serde(flatten)]
    overrides: toml::Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRun {
    pub name: String,
    pub teacher: Option<String>,
    /// Resolved config; its seed is replaced per matrix seed.
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub seeds: Vec<u64>,
    /// In execution order: every teacher precedes its students.
    pub runs: Vec<MatrixRun>,
}

impl ExperimentMatrix {
    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, preset_override)
    }

    pub fn parse(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let file: MatrixFile =
            toml::from_str(text).map_err(|e| Error::config("matrix", e.message().trim().to_string()))?;
        if file.seeds.is_empty() {
            return Err(Error::config("seeds", "the seeds list is empty"));
        }
        if file.runs.is_empty() {
            return Err(Error::config("runs", "the matrix has no runs"));
        }
        let base = file.base.unwrap_or_else(|| toml::Value::Table(Default::default()));
        let mut runs = Vec::with_capacity(file.runs.len());
        for entry in &file.runs {
            for key in ["dataset", "eval"] {
                if entry.overrides.contains_key(key) {
                    return Err(Error::config(
                        format!("runs.{}.{key}", entry.name),
                        "matrix members share the dataset and evaluation protocol; set it in [base]",
                    ));
                }
            }
            let mut table = base.clone();
            merge_toml(&mut table, toml::Value::Table(entry.overrides.clone()));
            let config = resolve(table, preset_override).map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("runs.{}.{field}", entry.name), message),
                other => other,
            })?;
            runs.push(MatrixRun {
                name: entry.name.clone(),
                teacher: entry.teacher.clone(),
                config,
            });
        }
        let runs = order_runs(runs)?;
        Ok(Self {
            seeds: file.seeds,
            runs,
        })
    }

    pub fn config_for(&self, run: &MatrixRun, seed: u64) -> RunConfig {
        run.config.clone().with_seed(seed)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
        for r in &self.runs {
            h.update(r.name.as_bytes());
            h.update(r.teacher.as_deref().unwrap_or("").as_bytes());
            h.update(r.config.digest().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Topological order with teachers first; stable with respect to file order.
fn order_runs(runs: Vec<MatrixRun>) -> Result<Vec<MatrixRun>> {
    let index: HashMap<&str, usize> = runs.iter().enumerate().map(|(i, r)| (r.name.as_str(), i)).collect();
    if index.len() != runs.len() {
        return Err(Error::config("runs", "run names must be unique"));
    }
    for r in &runs {
        match (&r.teacher, r.config.needs_teacher()) {
            (Some(t), _) if !index.contains_key(t.as_str()) => {
                return Err(Error::config(format!("runs.{}.teacher", r.name), format!("no run named `{t}`")));
            }
            (None, true) => {
                return Err(Error::config(
                    format!("runs.{}.teacher", r.name),
                    "this regime needs a teacher run",
                ));
            }
            _ => {}
        }
    }
    let mut state = vec![0u8; runs.len()]; // 0 new, 1 visiting, 2 done
    let mut order = Vec::with_capacity(runs.len());
    fn visit(i: usize, runs: &[MatrixRun], index: &HashMap<&str, usize>, state: &mut [u8], order: &mut Vec<usize>) -> Result<()> {
        match state[i] {
            2 => return Ok(()),
            1 => return Err(Error::config(format!("runs.{}.teacher", runs[i].name), "teacher cycle")),
            _ => {}
        }
        state[i] = 1;
        if let Some(t) = &runs[i].teacher {
            visit(index[t.as_str()], runs, index, state, order)?;
        }
        state[i] = 2;
        order.push(i);
        Ok(())
    }
    for i in 0..runs.len() {
        visit(i, &runs, &index, &mut state, &mut order)?;
    }
    let mut slots: Vec<Option<MatrixRun>> = runs.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single run).
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracy: Option<Stat>,
    pub auroc: Option<Stat>,
    pub oscr: Option<Stat>,
    pub mean_logit_norm_known: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub name: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<RunFailure>,
}

/// One successful member run.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberReport {
    pub name: String,
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Aggregate member reports into one row per name (in `names` order).
pub fn aggregate(
    names: &[(String, String)],
    members: &[MemberReport],
    failures: Vec<RunFailure>,
    seeds: &[u64],
    digest: &str,
) -> MatrixSummary {
    let rows = names
        .iter()
        .map(|(name, label)| {
            let mine: Vec<&MemberReport> = members.iter().filter(|m| &m.name == name).collect();
            let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<Stat> {
                let v: Vec<f64> = mine.iter().filter_map(|m| f(&m.report)).collect();
                Stat::of(&v)
            };
            SummaryRow {
                name: name.clone(),
                label: label.clone(),
                seeds: mine.iter().map(|m| m.seed).collect(),
                accuracy: col(&|r| Some(r.accuracy)),
                auroc: col(&|r| r.auroc),
                oscr: col(&|r| r.oscr),
                mean_logit_norm_known: col(&|r| Some(r.mean_logit_norm_known)),
            }
        })
        .collect();
    MatrixSummary {
        schema_version: SCHEMA_VERSION,
        kind: "matrix_summary".into(),
        config_digest: digest.into(),
        seeds: seeds.to_vec(),
        rows,
        failures,
    }
}

pub fn run_dir(out: &Path, name: &str, seed: u64) -> PathBuf {
    out.join(name).join(format!("seed-{seed}"))
}

/// Train and evaluate one member; writes `report.json` into its directory.
pub fn run_member(matrix: &ExperimentMatrix, run: &MatrixRun, seed: u64, out: &Path) -> Result<EvalReport> {
    let cfg = matrix.config_for(run, seed);
    let dir = run_dir(out, &run.name, seed);
    let teacher = run
        .teacher
        .as_ref()
        .map(|t| run_dir(out, t, seed).join(FINAL_CHECKPOINT));
    if let Some(t) = &teacher {
        if !t.exists() {
            return Err(Error::InvalidArgument(format!(
                "teacher run `{}` produced no checkpoint for seed {seed}",
                run.teacher.as_deref().unwrap_or_default()
            )));
        }
    }
    let (outcome, data) = pipeline::train(&TrainRequest {
        config: &cfg,
        teacher: teacher.as_deref().filter(|_| cfg.needs_teacher()),
        resume: None,
        out_dir: &dir,
    })?;
    let report = pipeline::eval_model(&outcome.model, &data, &cfg, cfg.eval.score)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub struct MatrixOutcome {
    pub summary: MatrixSummary,
    pub members: Vec<MemberReport>,
}

/// Run every (config × seed). Seeds are distributed over up to `workers`
/// threads; within a seed, runs execute in dependency order. Failures are
/// recorded and the matrix continues.
pub fn run_matrix(
    matrix: &ExperimentMatrix,
    out: &Path,
    workers: usize,
    on_done: &(dyn Fn(&str, u64, &Result<EvalReport>) + Sync),
) -> Result<MatrixOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, usize, Result<EvalReport>)>> = Mutex::new(Vec::new());
    let work = || loop {
        let s = next.fetch_add(1, Ordering::SeqCst);
        let Some(&seed) = matrix.seeds.get(s) else { break };
        for (r, run) in matrix.runs.iter().enumerate() {
            let res = run_member(matrix, run, seed, out);
            on_done(&run.name, seed, &res);
            results.lock().unwrap().push((s, r, res));
        }
    };
    let workers = workers.clamp(1, matrix.seeds.len());
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(work);
            }
        });
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(s, r, _)| (*s, *r));
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (s, r, res) in results {
        let run = &matrix.runs[r];
        let seed = matrix.seeds[s];
        match res {
            Ok(report) => members.push(MemberReport {
                name: run.name.clone(),
                label: run.config.label(),
                seed,
                report,
            }),
            Err(e) => failures.push(RunFailure {
                name: run.name.clone(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    let names: Vec<(String, String)> = matrix.runs.iter().map(|r| (r.name.clone(), r.config.label())).collect();
    let summary = aggregate(&names, &members, failures, &matrix.seeds, &matrix.digest());
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(MatrixOutcome { summary, members })
}

/// Re-read member reports from disk (for recomputation checks).
pub fn load_member_reports(matrix: &ExperimentMatrix, out: &Path) -> Result<Vec<MemberReport>> {
    let mut v = Vec::new();
    for seed in &matrix.seeds {
        for run in &matrix.runs {
            let path = run_dir(out, &run.name, *seed).join(REPORT_FILE);
            if path.exists() {
                v.push(MemberReport {
                    name: run.name.clone(),
                    label: run.config.label(),
                    seed: *seed,
                    report: read_json(&path)?,
                });
            }
        }
    }
    Ok(v)
}
