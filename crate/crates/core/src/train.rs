//! Training regimes.
//!
//! - `vanilla`: cross-entropy, optionally on CutOut/AugMix-like or CutMix/MixUp
//!   batches (the latter with the mixed-label objective);
//! - `symmetric_distill`: raw batches use CE + KL to a frozen teacher, mixed
//!   batches use KL on the same mixed images;
//! - `asymmetric_distill`: as symmetric, plus the teacher sees the raw sources
//!   of every mixed image, adding the cross mutual information term and the
//!   two-hot relabel term;
//! - `teacher_free`: raw and mixed samples share one batch; confident mixed
//!   samples get MI maximization against their raw sources, uncertain ones a
//!   uniform target.
//!
//! Randomness is derived per epoch from the run seed, so training resumed
//! from an epoch-boundary checkpoint follows the uninterrupted trajectory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, MixedBatch};
use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, mix_seed, Dataset, LabeledBatch, SplitSeed};
use crate::error::{Error, Result};
use crate::losses::{
    cmi_loss, cross_entropy_soft, kl_distill, mixed_ce, one_hot, relabel_loss, tf_mi_loss,
    tf_relabel_loss, LossBreakdown, LossWeights,
};
use crate::model::{Classifier, Forward, FrozenClassifier, Grads};
use crate::optim::{Sgd, StepSchedule};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Vanilla,
    SymmetricDistill,
    AsymmetricDistill,
    TeacherFree,
}

impl Regime {
    pub fn needs_teacher(self) -> bool {
        matches!(self, Regime::SymmetricDistill | Regime::AsymmetricDistill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub tau_upper: f64,
    pub tau_lower: f64,
    /// Probability that a batch takes the mixed branch.
    pub mix_probability: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<u32>,
    /// Multiplier applied at each decay epoch (0.2 = "reduce by a factor of 5").
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: SplitSeed,
    /// Add the mixed-label CE to the distillation mixed branch.
    pub mixed_branch_ce: bool,
    /// Stop the teacher-free MI gradient at the raw-sample features.
    pub tf_mi_stop_grad_raw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Vanilla,
            augment: AugmentConfig::default(),
            weights: LossWeights::default(),
            tau_upper: 0.8,
            tau_lower: 0.5,
            mix_probability: 0.5,
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            lr_decay_epochs: vec![9, 18, 24],
            lr_decay_factor: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: SplitSeed::default(),
            mixed_branch_ce: false,
            tf_mi_stop_grad_raw: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.weights.validate()?;
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.regime == Regime::TeacherFree {
            if !(0.0..=1.0).contains(&self.tau_upper) || !(0.0..=1.0).contains(&self.tau_lower) {
                return Err(Error::config("train.tau_upper", "thresholds must lie in [0, 1]"));
            }
            if self.tau_lower >= self.tau_upper {
                return Err(Error::config("train.tau_lower", "must be below tau_upper"));
            }
        } else if !unit(self.tau_upper) || !unit(self.tau_lower) {
            return Err(Error::config("train.tau_upper", "thresholds must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::config("train.mix_probability", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("train.lr_decay_factor", "must be > 0"));
        }
        let needs_mix = matches!(self.regime, Regime::SymmetricDistill | Regime::AsymmetricDistill | Regime::TeacherFree);
        if needs_mix && !self.augment.kind.is_multi_sample() {
            return Err(Error::config(
                "train.augment.kind",
                format!("{:?} needs cutmix or mixup", self.regime),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            milestones: self.lr_decay_epochs.clone(),
            factor: self.lr_decay_factor,
        }
    }
}

/// Which data flow a step used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Raw,
    Mixed,
    Joint,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub branch: Branch,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Student parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Classifier<f32>,
    pub optimizer: Sgd<f32>,
}

impl Learner {
    pub fn new(model: Classifier<f32>, cfg: &TrainConfig) -> Self {
        let optimizer = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
        Self { model, optimizer }
    }

    fn apply(&mut self, grads: &Grads<f32>, lr: f64) {
        self.optimizer.step(&mut self.model, grads, lr);
    }
}

fn check_total(step: u64, b: &LossBreakdown) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            breakdown: Box::new(b.clone()),
        })
    }
}

fn labels_one_hot(batch: &LabeledBatch, classes: usize) -> Result<Mat> {
    Ok(one_hot(&batch.class_indices()?, classes))
}

/// Per-step context shared by the step functions.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub lr: f64,
    pub step: u64,
}

/// CE baseline, with SSA or MSA augmentation depending on `augment.kind`.
pub fn train_step_baseline<R: Rng + ?Sized>(
    learner: &mut Learner,
    batch: &LabeledBatch,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<(Branch, LossBreakdown)> {
    let cfg = ctx.cfg;
    let classes = learner.model.num_classes();
    let mut b = LossBreakdown::default();
    let (branch, d_logits, cache) = if cfg.augment.kind.is_multi_sample() {
        let use_mix = rng.random::<f64>() < cfg.mix_probability && batch.len() >= 2;
        if use_mix {
            let mixed = augment::mix(batch, &cfg.augment, classes, rng)?;
            let (out, cache) = learner.model.forward_train(&mixed.images)?;
            let l = mixed_ce(&out.logits, &mixed)?;
            b.mixed_ce = l.value;
            b.active_counts.mixed_ce = mixed.len();
            b.total = l.value;
            (Branch::Mixed, l.grad, cache)
        } else {
            let (out, cache) = learner.model.forward_train(&batch.images)?;
            let l = cross_entropy_soft(&out.logits, &labels_one_hot(batch, classes)?)?;
            b.ce = l.value;
            b.active_counts.ce = batch.len();
            b.total = l.value;
            (Branch::Raw, l.grad, cache)
        }
    } else {
        let aug = augment::apply_single_sample(batch, &cfg.augment, rng)?;
        let (out, cache) = learner.model.forward_train(&aug.images)?;
        let l = cross_entropy_soft(&out.logits, &labels_one_hot(&aug, classes)?)?;
        b.ce = l.value;
        b.active_counts.ce = aug.len();
        b.total = l.value;
        (Branch::Raw, l.grad, cache)
    };
    check_total(ctx.step, &b)?;
    let grads = learner.model.backward(&cache, &d_logits, None)?;
    learner.apply(&grads, ctx.lr);
    Ok((branch, b))
}

/// Distillation step. With `symmetric = true` the mixed branch uses KL only
/// (the symmetric CutMix distillation baseline); otherwise the teacher also
/// encodes the raw sources and the CMI and relabel terms are added.
pub fn train_step_distill<R: Rng + ?Sized>(
    learner: &mut Learner,
    teacher: &FrozenClassifier<f32>,
    batch: &LabeledBatch,
    ctx: &StepContext<'_>,
    symmetric: bool,
    rng: &mut R,
) -> Result<(Branch, LossBreakdown)> {
    let cfg = ctx.cfg;
    let w = &cfg.weights;
    let classes = learner.model.num_classes();
    if teacher.architecture().num_classes != classes || teacher.architecture().input != learner.model.arch().input {
        return Err(Error::config(
            "teacher",
            "teacher and student disagree on input shape or class count",
        ));
    }
    let use_mix = rng.random::<f64>() < cfg.mix_probability && batch.len() >= 2;
    let mut b = LossBreakdown::default();

    if !use_mix {
        let (out, cache) = learner.model.forward_train(&batch.images)?;
        let t_out = teacher.forward(&batch.images)?;
        let ce = cross_entropy_soft(&out.logits, &labels_one_hot(batch, classes)?)?;
        let kl = kl_distill(&out.logits, &t_out.logits, w.distill_temperature, w.kl_direction)?;
        b.ce = ce.value;
        b.distill = kl.value;
        b.kl_clamped = kl.clamped;
        b.active_counts.ce = batch.len();
        b.active_counts.distill = batch.len();
        b.total = ce.value + kl.value;
        check_total(ctx.step, &b)?;
        let mut d_logits = ce.grad;
        d_logits.add_scaled(&kl.grad, 1.0);
        let grads = learner.model.backward(&cache, &d_logits, None)?;
        learner.apply(&grads, ctx.lr);
        return Ok((Branch::Raw, b));
    }

    let mixed = augment::mix(batch, &cfg.augment, classes, rng)?;
    let (out, cache) = learner.model.forward_train(&mixed.images)?;
    let t_mixed = teacher.forward(&mixed.images)?;
    let kl = kl_distill(&out.logits, &t_mixed.logits, w.distill_temperature, w.kl_direction)?;
    b.distill = kl.value;
    b.kl_clamped = kl.clamped;
    b.active_counts.distill = mixed.len();
    b.total = kl.value;
    let mut d_logits = kl.grad;
    let mut d_features = None;

    if cfg.mixed_branch_ce {
        let l = mixed_ce(&out.logits, &mixed)?;
        b.mixed_ce = l.value;
        b.active_counts.mixed_ce = mixed.len();
        b.total += l.value;
        d_logits.add_scaled(&l.grad, 1.0);
    }

    if !symmetric {
        let (cmi_value, cmi_grad) = cross_term(&out.features, teacher, batch, &mixed, w.mi_temperature)?;
        b.cmi = cmi_value;
        b.active_counts.cmi = mixed.len();
        b.total += w.mu * cmi_value;
        if w.mu != 0.0 {
            let mut g = cmi_grad;
            g.scale(w.mu);
            d_features = Some(g);
        }

        let rel = relabel_loss(&out.logits, &mixed, &t_mixed.probs, w.verify)?;
        b.relabel = rel.value;
        b.active_counts.relabel = rel.active_count();
        b.total += w.eta * rel.value;
        if w.eta != 0.0 && rel.active_count() > 0 {
            d_logits.add_scaled(&rel.grad, w.eta);
        }
    }

    check_total(ctx.step, &b)?;
    let grads = learner.model.backward(&cache, &d_logits, d_features.as_ref())?;
    learner.apply(&grads, ctx.lr);
    Ok((Branch::Mixed, b))
}

/// Teacher features of the raw sources, then the CMI loss on the student's
/// mixed-sample features.
fn cross_term(
    student_mixed_features: &Mat,
    teacher: &FrozenClassifier<f32>,
    raw: &LabeledBatch,
    mixed: &MixedBatch,
    temperature: f64,
) -> Result<(f64, Mat)> {
    // One teacher pass over the raw batch serves both x_i and x_j.
    let t_raw = teacher.forward(&raw.images)?;
    let t_i = t_raw.features.select_rows(&mixed.src_i);
    let t_j = t_raw.features.select_rows(&mixed.src_j);
    let l = cmi_loss(student_mixed_features, &t_i, &t_j, &mixed.lam, temperature)?;
    Ok((l.value, l.grad))
}

/// The asymmetric-distillation step.
pub fn train_step_asymmetric<R: Rng + ?Sized>(
    learner: &mut Learner,
    teacher: &FrozenClassifier<f32>,
    batch: &LabeledBatch,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<(Branch, LossBreakdown)> {
    train_step_distill(learner, teacher, batch, ctx, false, rng)
}

/// Teacher-free step on a joint raw + mixed batch.
pub fn train_step_teacher_free<R: Rng + ?Sized>(
    learner: &mut Learner,
    batch: &LabeledBatch,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<(Branch, LossBreakdown)> {
    let cfg = ctx.cfg;
    let w = &cfg.weights;
    let classes = learner.model.num_classes();
    let b_raw = batch.len();
    let (raw, mixed) = if b_raw >= 2 {
        augment::build_mix_batch(batch, &cfg.augment, classes, rng)?
    } else {
        (batch.clone(), MixedBatch::empty(batch.images.shape, classes))
    };
    let bm = mixed.len();
    let images = raw.images.concat(&mixed.images)?;
    let (out, cache) = learner.model.forward_train(&images)?;
    let idx_raw: Vec<usize> = (0..b_raw).collect();
    let idx_mixed: Vec<usize> = (b_raw..b_raw + bm).collect();
    let logits_raw = out.logits.select_rows(&idx_raw);
    let feats_raw = out.features.select_rows(&idx_raw);

    let mut b = LossBreakdown::default();
    let ce = cross_entropy_soft(&logits_raw, &labels_one_hot(&raw, classes)?)?;
    b.ce = ce.value;
    b.active_counts.ce = b_raw;
    b.total = ce.value;

    let mut d_logits = Mat::zeros(b_raw + bm, classes);
    let mut d_feats = Mat::zeros(b_raw + bm, learner.model.feature_dim());
    d_logits.data[..b_raw * classes].copy_from_slice(&ce.grad.data);

    if bm > 0 {
        let logits_m = out.logits.select_rows(&idx_mixed);
        let probs_m = out.probs.select_rows(&idx_mixed);
        let feats_m = out.features.select_rows(&idx_mixed);
        let mi = tf_mi_loss(
            &feats_m,
            &feats_raw,
            &mixed.src_i,
            &mixed.src_j,
            &probs_m,
            &mixed.c1,
            &mixed.c2,
            cfg.tau_upper,
            w.mi_temperature,
        )?;
        b.mi = mi.value;
        b.active_counts.mi = mi.active_count();
        b.total += w.mu * mi.value;

        let rel = tf_relabel_loss(&logits_m, &probs_m, cfg.tau_lower, classes)?;
        b.relabel = rel.value;
        b.active_counts.relabel = rel.active_count();
        b.total += w.eta * rel.value;

        let d = learner.model.feature_dim();
        if w.mu != 0.0 && mi.active_count() > 0 {
            for (dst, src) in d_feats.data[b_raw * d..].iter_mut().zip(&mi.d_mixed.data) {
                *dst += w.mu * src;
            }
            if !cfg.tf_mi_stop_grad_raw {
                for (dst, src) in d_feats.data[..b_raw * d].iter_mut().zip(&mi.d_raw.data) {
                    *dst += w.mu * src;
                }
            }
        }
        if w.eta != 0.0 && rel.active_count() > 0 {
            for (dst, src) in d_logits.data[b_raw * classes..].iter_mut().zip(&rel.grad.data) {
                *dst += w.eta * src;
            }
        }
    }

    check_total(ctx.step, &b)?;
    let grads = learner.model.backward(&cache, &d_logits, Some(&d_feats))?;
    learner.apply(&grads, ctx.lr);
    Ok((Branch::Joint, b))
}

/// Options for [`run_training`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write checkpoints and `metrics.jsonl` here when set.
    pub out_dir: Option<PathBuf>,
    pub config_digest: String,
    pub resume: Option<Checkpoint<f32>>,
    /// Stop after this many epochs (for tests of resumption).
    pub stop_after_epoch: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier<f32>,
    pub history: Vec<StepRecord>,
    pub final_checkpoint: Checkpoint<f32>,
    pub saved: Vec<PathBuf>,
}

fn epoch_rng(seed: SplitSeed, epoch: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed.rng_seed, 0x5eed_0000 + epoch as u64))
}

fn rng_blob(seed: SplitSeed) -> Vec<u8> {
    let mut v = seed.rng_seed.to_le_bytes().to_vec();
    v.extend_from_slice(&seed.split_seed.to_le_bytes());
    v
}

fn snapshot(learner: &Learner, digest: &str, epoch: u32, step: u64, seed: SplitSeed) -> Checkpoint<f32> {
    let mut ck = Checkpoint::from_model(&learner.model, digest);
    ck.velocity = Some(learner.optimizer.velocity.clone());
    ck.epoch = epoch;
    ck.step = step;
    ck.rng_state = rng_blob(seed);
    ck
}

fn append_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train `model` under `cfg` on `data.train`.
pub fn run_training(
    cfg: &TrainConfig,
    model: Classifier<f32>,
    data: &Dataset,
    teacher: Option<&FrozenClassifier<f32>>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.regime.needs_teacher() && teacher.is_none() {
        return Err(Error::config(
            "teacher",
            format!("{:?} requires a teacher checkpoint", cfg.regime),
        ));
    }
    if model.arch().input != data.train.images.shape {
        return Err(Error::shape("dataset vs model input", model.arch().input, data.train.images.shape));
    }
    if model.num_classes() != data.num_classes {
        return Err(Error::shape("dataset vs model classes", model.num_classes(), data.num_classes));
    }

    let mut learner = Learner::new(model, cfg);
    let mut start_epoch = 0;
    let mut step = 0u64;
    if let Some(ck) = &opts.resume {
        learner.model = ck.model()?;
        if let Some(v) = &ck.velocity {
            learner.optimizer.velocity = v.clone();
        }
        start_epoch = ck.epoch;
        step = ck.step;
    }

    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let schedule = cfg.schedule();
    let mut history = Vec::new();
    let mut saved = Vec::new();
    let last_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in start_epoch..last_epoch {
        let lr = schedule.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = make_batches(&data.train, cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let mut epoch_records = Vec::with_capacity(batches.len());
        for batch in &batches {
            let ctx = StepContext { cfg, lr, step };
            let (branch, losses) = match cfg.regime {
                Regime::Vanilla => train_step_baseline(&mut learner, batch, &ctx, &mut rng)?,
                Regime::SymmetricDistill => {
                    train_step_distill(&mut learner, teacher.expect("checked"), batch, &ctx, true, &mut rng)?
                }
                Regime::AsymmetricDistill => {
                    train_step_asymmetric(&mut learner, teacher.expect("checked"), batch, &ctx, &mut rng)?
                }
                Regime::TeacherFree => train_step_teacher_free(&mut learner, batch, &ctx, &mut rng)?,
            };
            epoch_records.push(StepRecord {
                step,
                epoch,
                branch,
                lr,
                losses,
            });
            step += 1;
        }
        if let Some(p) = &metrics_path {
            append_metrics(p, &epoch_records)?;
        }
        history.extend(epoch_records);

        let done = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            if schedule.is_milestone(done) && done < cfg.epochs {
                let path = dir.join(format!("checkpoint-epoch{done:03}.bin"));
                snapshot(&learner, &opts.config_digest, done, step, cfg.seed).save(&path)?;
                saved.push(path);
            }
        }
    }

    let final_checkpoint = snapshot(&learner, &opts.config_digest, last_epoch, step, cfg.seed);
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("checkpoint-final.bin");
        final_checkpoint.save(&path)?;
        saved.push(path);
    }
    Ok(TrainOutcome {
        model: learner.model,
        history,
        final_checkpoint,
        saved,
    })
}

/// Exponential moving average of the step totals (for sanity checks).
pub fn smoothed_totals(history: &[StepRecord], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc = None;
    for r in history {
        let v = match acc {
            None => r.losses.total,
            Some(a) => decay * a + (1.0 - decay) * r.losses.total,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

/// Convenience: whether a config uses multi-sample mixing at all.
pub fn uses_mixing(cfg: &TrainConfig) -> bool {
    cfg.regime != Regime::Vanilla || cfg.augment.kind.is_multi_sample()
}
