//! End-to-end operations behind the command-line tools. Each writes its
//! artifacts into an output directory next to a `config.lock`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentKind};
use crate::checkpoint::Checkpoint;
use crate::config::{write_lock, RunConfig};
use crate::data::{load_dataset, Dataset};
use crate::diagnostics::{
    discrepancy_matrix, mixed_stream, norm_stats, teacher_audit, uncertainty_histogram, DiscrepancyMatrix,
    NormStats, Split, TeacherAudit,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, ScoreHistograms, ScoreKind, SCHEMA_VERSION};
use crate::model::{freeze, Classifier, FrozenClassifier};
use crate::plot;
use crate::train::{run_training, RunOptions, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.bin";
pub const REPORT_FILE: &str = "report.json";

/// JSON wrapper adding `schema_version`, `kind` and `config_digest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: &str, config_digest: &str, body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            config_digest: config_digest.into(),
            body,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load a checkpoint as a frozen teacher compatible with `cfg`.
pub fn load_teacher(path: &Path, cfg: &RunConfig) -> Result<FrozenClassifier<f32>> {
    let model = Checkpoint::<f32>::load(path)?.model()?;
    let arch = model.arch();
    if arch.input != cfg.dataset.image_shape || arch.num_classes != cfg.dataset.num_classes() {
        return Err(Error::config(
            "teacher",
            format!(
                "teacher expects {} inputs and {} classes; the config has {} and {}",
                arch.input,
                arch.num_classes,
                cfg.dataset.image_shape,
                cfg.dataset.num_classes()
            ),
        ));
    }
    if arch.feature_dim() != cfg.model.feature_dim {
        return Err(Error::config(
            "teacher",
            format!(
                "teacher feature dimension {} differs from model.feature_dim {}",
                arch.feature_dim(),
                cfg.model.feature_dim
            ),
        ));
    }
    Ok(freeze(model))
}

/// Load a checkpoint trained under `cfg`; a digest mismatch is a config error.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Classifier<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    let want = cfg.digest();
    if ck.config_digest != want {
        return Err(Error::config(
            "checkpoint",
            format!(
                "{} was trained under config digest {}, but the given config resolves to {}",
                path.display(),
                ck.config_digest,
                want
            ),
        ));
    }
    ck.model()
}

/// Drop log lines from epochs at or after `epoch` (used when resuming).
fn truncate_metrics(path: &Path, epoch: u32) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if v.get("epoch").and_then(|e| e.as_u64()).is_some_and(|e| e < epoch as u64) {
            kept.push(line);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub struct TrainRequest<'a> {
    pub config: &'a RunConfig,
    pub teacher: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub out_dir: &'a Path,
}

pub fn train(req: &TrainRequest<'_>) -> Result<(TrainOutcome, Dataset)> {
    let cfg = req.config;
    cfg.validate()?;
    if cfg.needs_teacher() && req.teacher.is_none() {
        return Err(Error::config(
            "--teacher",
            format!(
                "regime {:?} needs a frozen teacher; pass --teacher <checkpoint>",
                cfg.train.regime
            ),
        ));
    }
    let teacher = match req.teacher {
        Some(p) if cfg.needs_teacher() => Some(load_teacher(p, cfg)?),
        _ => None,
    };
    let data = load_dataset(&cfg.dataset)?;
    let digest = cfg.digest();
    let resume = match req.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.config_digest != digest {
                return Err(Error::config(
                    "--resume",
                    format!("checkpoint digest {} does not match config {digest}", ck.config_digest),
                ));
            }
            Some(ck)
        }
        None => None,
    };
    write_lock(req.out_dir, cfg)?;
    let metrics = req.out_dir.join(METRICS_FILE);
    match &resume {
        Some(ck) => truncate_metrics(&metrics, ck.epoch)?,
        None if metrics.exists() => fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?,
        None => {}
    }
    let opts = RunOptions {
        out_dir: Some(req.out_dir.to_path_buf()),
        config_digest: digest,
        resume,
        stop_after_epoch: None,
    };
    let outcome = run_training(&cfg.train, cfg.build_model()?, &data, teacher.as_ref(), &opts)?;
    Ok((outcome, data))
}

/// Evaluate a model and stamp the report with the config digest.
pub fn eval_model(model: &Classifier<f32>, data: &Dataset, cfg: &RunConfig, score: ScoreKind) -> Result<EvalReport> {
    let mut report = evaluate(model, &data.eval_known, &data.eval_unknown, score)?;
    report.config_digest = cfg.digest();
    Ok(report)
}

pub fn eval(checkpoint: &Path, cfg: &RunConfig, score: Option<ScoreKind>) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let data = load_dataset(&cfg.dataset)?;
    eval_model(&model, &data, cfg, score.unwrap_or(cfg.eval.score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub known: NormStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unknown: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub n_classes: usize,
    pub histograms: ScoreHistograms,
}

#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub norms: NormReport,
    pub discrepancy: Option<DiscrepancyMatrix>,
    pub audit: TeacherAudit,
    pub uncertainty: ScoreHistograms,
    pub written: Vec<PathBuf>,
}

/// Augmentation used for audits: the configured mixer, or CutMix when the
/// run did not use one.
fn audit_mixer(cfg: &RunConfig) -> AugmentConfig {
    let mut aug = cfg.train.augment.clone();
    if !aug.kind.is_multi_sample() {
        aug.kind = AugmentKind::Cutmix;
    }
    aug
}

pub fn audit_model(model: &Classifier<f32>, data: &Dataset, cfg: &RunConfig) -> Result<TeacherAudit> {
    let d = &cfg.diagnose;
    let aug = audit_mixer(cfg);
    let stream = mixed_stream(&data.train, &aug, data.num_classes, d.audit_batch_size, d.audit_seed);
    teacher_audit(model, stream, d.audit_samples)
}

pub fn audit(checkpoint: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<TeacherAudit> {
    // Any checkpoint may be audited as a teacher, so the digest is not checked.
    let model = Checkpoint::<f32>::load(checkpoint)?.model()?;
    let data = load_dataset(&cfg.dataset)?;
    let a = audit_model(&model, &data, cfg)?;
    write_lock(out_dir, cfg)?;
    write_json(&out_dir.join("audit.json"), &Envelope::new("teacher_audit", &cfg.digest(), &a))?;
    Ok(a)
}

pub fn diagnose_model(model: &Classifier<f32>, data: &Dataset, cfg: &RunConfig, out_dir: &Path) -> Result<Diagnosis> {
    let digest = cfg.digest();
    let d = &cfg.diagnose;
    let norms = NormReport {
        known: norm_stats(model, &data.eval_known, Split::Known)?,
        unknown: if data.has_unknowns() {
            Some(norm_stats(model, &data.eval_unknown, Split::Unknown)?)
        } else {
            None
        },
    };
    let discrepancy = if data.has_unknowns() {
        Some(discrepancy_matrix(
            model,
            &data.eval_known,
            &data.eval_unknown,
            &cfg.dataset.known_classes,
            &data.unknown_class_ids,
        )?)
    } else {
        None
    };
    let audit = audit_model(model, data, cfg)?;
    let uncertainty = uncertainty_histogram(model, &data.eval_known, &data.eval_unknown, d.uncertainty_bins)?;

    write_lock(out_dir, cfg)?;
    let mut written = Vec::new();
    let mut put = |name: &str, kind: &str, value: serde_json::Value| -> Result<()> {
        let path = out_dir.join(name);
        write_json(&path, &Envelope::new(kind, &digest, value))?;
        written.push(path);
        Ok(())
    };
    put("norms.json", "norm_stats", to_value(&norms)?)?;
    if let Some(m) = &discrepancy {
        put("discrepancy.json", "discrepancy_matrix", to_value(m)?)?;
    }
    put("audit.json", "teacher_audit", to_value(&audit)?)?;
    put(
        "uncertainty_hist.json",
        "uncertainty_histogram",
        to_value(&HistogramReport {
            n_classes: data.num_classes,
            histograms: uncertainty.clone(),
        })?,
    )?;
    if d.render_png {
        if let Some(m) = &discrepancy {
            let p = out_dir.join("discrepancy.png");
            plot::save(&plot::heatmap(m, plot::CELL_PX), &p)?;
            written.push(p);
        }
        let p = out_dir.join("uncertainty_hist.png");
        plot::save(&plot::histogram_pair(&uncertainty), &p)?;
        written.push(p);
    }
    Ok(Diagnosis {
        norms,
        discrepancy,
        audit,
        uncertainty,
        written,
    })
}

pub fn diagnose(checkpoint: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<Diagnosis> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let data = load_dataset(&cfg.dataset)?;
    diagnose_model(&model, &data, cfg, out_dir)
}
