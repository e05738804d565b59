//! Run configuration: presets, TOML resolution and the config digest.
//!
//! A config file is a TOML table mirroring [`RunConfig`]. If it names a
//! `preset`, the file's keys are deep-merged over that preset; missing keys
//! take their defaults. The digest is the SHA-256 of the canonical JSON
//! encoding of the resolved `dataset`, `model` and `train` sections: the
//! parts that determine a trained checkpoint. Evaluation and diagnostic
//! options can change without invalidating existing checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentKind;
use crate::data::{DatasetSpec, Layout, Normalization, SplitSeed};
use crate::error::{Error, Result};
use crate::metrics::{ScoreKind, SCHEMA_VERSION};
use crate::model::{build_reference_cnn, Classifier};
use crate::optim::rescale_milestones;
use crate::synth::SynthConfig;
use crate::tensor::ImageShape;
use crate::train::{Regime, TrainConfig};

pub const PRESETS: &[&str] = &["desk-mnist", "desk-cifar-lite", "paper-schedule"];
pub const LOCK_FILE: &str = "config.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Derived from the training seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score: ScoreKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score: ScoreKind::Mls }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Mixed samples inspected by the teacher audit.
    pub audit_samples: usize,
    pub audit_batch_size: usize,
    pub audit_seed: u64,
    pub uncertainty_bins: usize,
    pub render_png: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            audit_samples: 10_000,
            audit_batch_size: 128,
            audit_seed: 0,
            uncertainty_bins: 20,
            render_png: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

fn desk_mnist() -> RunConfig {
    let epochs = 30;
    RunConfig {
        preset: Some("desk-mnist".into()),
        dataset: DatasetSpec {
            root_path: PathBuf::from("data/desk-mnist"),
            layout: Layout::ArrayFile,
            known_classes: (0..6).collect(),
            unknown_classes: (6..10).collect(),
            image_shape: ImageShape::new(16, 16, 1),
            normalization: Normalization {
                mean: vec![0.0],
                std: vec![1.0],
            },
            max_train_per_class: None,
            synthesize: Some(SynthConfig::default()),
        },
        model: ModelConfig {
            feature_dim: 64,
            init_seed: None,
        },
        train: TrainConfig {
            epochs,
            lr: 0.02,
            lr_decay_epochs: rescale_milestones(&[60, 120, 160], 200, epochs),
            ..TrainConfig::default()
        },
        eval: EvalConfig::default(),
        diagnose: DiagnoseConfig::default(),
    }
}

fn desk_cifar_lite() -> RunConfig {
    let epochs = 30;
    RunConfig {
        preset: Some("desk-cifar-lite".into()),
        dataset: DatasetSpec {
            root_path: PathBuf::from("data/cifar-lite"),
            layout: Layout::ArrayFile,
            known_classes: (0..6).collect(),
            unknown_classes: (6..10).collect(),
            image_shape: ImageShape::new(32, 32, 3),
            normalization: Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            max_train_per_class: Some(500),
            synthesize: None,
        },
        model: ModelConfig::default(),
        train: TrainConfig {
            epochs,
            lr: 0.02,
            lr_decay_epochs: rescale_milestones(&[60, 120, 160], 200, epochs),
            ..TrainConfig::default()
        },
        eval: EvalConfig::default(),
        diagnose: DiagnoseConfig::default(),
    }
}

fn paper_schedule() -> RunConfig {
    let mut cfg = desk_cifar_lite();
    cfg.preset = Some("paper-schedule".into());
    cfg.dataset.max_train_per_class = None;
    cfg.model.feature_dim = 512;
    cfg.train = TrainConfig {
        epochs: 200,
        lr: 0.1,
        lr_decay_epochs: vec![60, 120, 160],
        ..TrainConfig::default()
    };
    cfg
}

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "desk-mnist" => Ok(desk_mnist()),
        "desk-cifar-lite" => Ok(desk_cifar_lite()),
        "paper-schedule" => Ok(paper_schedule()),
        other => Err(Error::config(
            "preset",
            format!("unknown preset `{other}` (available: {})", PRESETS.join(", ")),
        )),
    }
}

/// Overlay `over` onto `base`, recursing into tables.
pub fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn to_toml_value(cfg: &RunConfig) -> Result<toml::Value> {
    toml::Value::try_from(cfg).map_err(|e| Error::Serde(e.to_string()))
}

/// Resolve a parsed config table. `preset_override` (from the command line)
/// takes precedence over a `preset` key in the table.
pub fn resolve(table: toml::Value, preset_override: Option<&str>) -> Result<RunConfig> {
    let named = table.get("preset").and_then(|v| v.as_str()).map(str::to_owned);
    let preset_name = preset_override.map(str::to_owned).or(named);
    let merged = match &preset_name {
        Some(name) => {
            let mut base = to_toml_value(&preset(name)?)?;
            merge_toml(&mut base, table);
            base
        }
        None => table,
    };
    let mut cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(field_of(&e), e.message().trim().to_string()))?;
    cfg.preset = preset_name;
    cfg.validate()?;
    Ok(cfg)
}

/// Best-effort key name from a TOML error message.
fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".into()
}

impl RunConfig {
    /// Parse a TOML file; a relative `dataset.root_path` is taken relative to
    /// the file's directory.
    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.message().trim().to_string()))?;
        let user_sets_root = table
            .get("dataset")
            .and_then(|d| d.get("root_path"))
            .is_some();
        let mut cfg = resolve(table, preset_override)?;
        if user_sets_root && cfg.dataset.root_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.root_path = dir.join(&cfg.dataset.root_path);
            }
        }
        Ok(cfg)
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        let cfg = preset(name)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.model.feature_dim < 8 {
            return Err(Error::config("model.feature_dim", "must be >= 8"));
        }
        let s = self.dataset.image_shape;
        if s.height < 16 || s.width < 16 {
            return Err(Error::config(
                "dataset.image_shape",
                format!("the reference network needs at least 16x16 inputs, got {s}"),
            ));
        }
        if self.diagnose.uncertainty_bins < 2 {
            return Err(Error::config("diagnose.uncertainty_bins", "must be >= 2"));
        }
        if self.diagnose.audit_samples == 0 || self.diagnose.audit_batch_size == 0 {
            return Err(Error::config("diagnose.audit_samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Replace the training seed (both streams).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = SplitSeed::new(seed);
        self
    }

    pub fn init_seed(&self) -> u64 {
        self.model
            .init_seed
            .unwrap_or_else(|| crate::data::mix_seed(self.train.seed.rng_seed, 0x1417))
    }

    pub fn build_model(&self) -> Result<Classifier<f32>> {
        let mut m = build_reference_cnn(
            self.dataset.num_classes(),
            self.model.feature_dim,
            self.dataset.image_shape,
            self.init_seed(),
        )?;
        let norm = &self.dataset.normalization;
        m.set_normalization(norm.mean.clone(), norm.std.clone())?;
        Ok(m)
    }

    pub fn canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            dataset: &'a DatasetSpec,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
        }
        serde_json::to_string(&Identity {
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
        })
        .expect("config serializes")
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical_json().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn needs_teacher(&self) -> bool {
        self.train.regime.needs_teacher()
    }

    /// Short human label, e.g. `asymmetric_distill+cutmix`.
    pub fn label(&self) -> String {
        let regime = match self.train.regime {
            Regime::Vanilla => "vanilla",
            Regime::SymmetricDistill => "symmetric_distill",
            Regime::AsymmetricDistill => "asymmetric_distill",
            Regime::TeacherFree => "teacher_free",
        };
        match self.train.augment.kind {
            AugmentKind::None => regime.to_string(),
            k => format!("{regime}+{}", format!("{k:?}").to_lowercase()),
        }
    }
}

/// Contents of `config.lock`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigLock {
    pub schema_version: u32,
    pub config_digest: String,
    pub config: RunConfig,
}

pub fn write_lock(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lock = ConfigLock {
        schema_version: SCHEMA_VERSION,
        config_digest: cfg.digest(),
        config: cfg.clone(),
    };
    let path = dir.join(LOCK_FILE);
    let text = serde_json::to_string_pretty(&lock).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_lock(dir: &Path) -> Result<ConfigLock> {
    let path = dir.join(LOCK_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode {
        path,
        message: e.to_string(),
    })
}
