//! Open-set scoring and evaluation.

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::model::{Forward, ModelOutput};
use crate::tensor::argmax;

pub const SCHEMA_VERSION: u32 = 1;
pub const OSCR_CONVENTION: &str =
    "exact sweep over all distinct scores, trapezoid in FPR, endpoints (0,0) and (1,accuracy)";
const EVAL_CHUNK: usize = 256;
const SCORE_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Maximum logit.
    #[default]
    Mls,
    /// `max p − 1`, the negated uncertainty, so higher is still more known-like.
    NegUncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub predicted_class: usize,
    /// Class index for knowns, `-1` for unknowns.
    pub true_class: i32,
    pub is_known: bool,
}

impl ScoredSample {
    pub fn is_correct(&self) -> bool {
        self.is_known && self.true_class == self.predicted_class as i32
    }
}

/// Per-sample maximum logit.
pub fn mls_score(output: &ModelOutput) -> Vec<f64> {
    output
        .logits
        .rows_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Per-sample `1 − max p`; higher means more unknown-like.
pub fn uncertainty_score(output: &ModelOutput) -> Vec<f64> {
    output
        .probs
        .rows_iter()
        .map(|r| 1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn open_set_score(output: &ModelOutput, kind: ScoreKind) -> Vec<f64> {
    match kind {
        ScoreKind::Mls => mls_score(output),
        ScoreKind::NegUncertainty => uncertainty_score(output).into_iter().map(|u| -u).collect(),
    }
}

/// Probability that a known outscores an unknown, ties counted as one half.
///
/// Computed from midranks (Mann–Whitney U), which is exactly the pair count.
pub fn auroc(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    if known_scores.is_empty() || unknown_scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "AUROC needs both splits (known {}, unknown {})",
            known_scores.len(),
            unknown_scores.len()
        )));
    }
    if known_scores.iter().chain(unknown_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("open-set scores"));
    }
    let mut all: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, true))
        .chain(unknown_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of 2×rank to keep midranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1, midrank×2 = i + j + 2
        let twice_mid = (i + j + 2) as u128;
        let knowns = all[i..=j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += twice_mid * knowns;
        i = j + 1;
    }
    let nk = known_scores.len() as u128;
    let nu = unknown_scores.len() as u128;
    let twice_u = twice_rank_sum - nk * (nk + 1);
    Ok(twice_u as f64 / (2 * nk * nu) as f64)
}

/// Points of the CCR-vs-FPR curve, including both endpoints.
pub fn oscr_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let nk = samples.iter().filter(|s| s.is_known).count();
    let nu = samples.len() - nk;
    if nk == 0 || nu == 0 {
        return Err(Error::InvalidArgument(format!(
            "OSCR needs both splits (known {nk}, unknown {nu})"
        )));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].score;
        while i < sorted.len() && sorted[i].score == theta {
            let s = sorted[i];
            if s.is_correct() {
                correct += 1;
            } else if !s.is_known {
                false_pos += 1;
            }
            i += 1;
        }
        points.push((false_pos as f64 / nu as f64, correct as f64 / nk as f64));
    }
    Ok(points)
}

/// Area under the CCR-vs-FPR curve (trapezoid over the exact threshold sweep).
pub fn oscr(samples: &[ScoredSample]) -> Result<f64> {
    let pts = oscr_curve(samples)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

pub fn closed_set_accuracy(samples: &[ScoredSample]) -> f64 {
    let known: Vec<_> = samples.iter().filter(|s| s.is_known).collect();
    if known.is_empty() {
        return 0.0;
    }
    known.iter().filter(|s| s.is_correct()).count() as f64 / known.len() as f64
}

/// Uniform-bin histograms of open-set scores for both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub edges: Vec<f64>,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
}

fn score_histograms(known: &[f64], unknown: &[f64], bins: usize) -> ScoreHistograms {
    let (lo, hi) = known
        .iter()
        .chain(unknown)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    ScoreHistograms {
        edges,
        known: histogram(known, lo, hi, bins),
        unknown: histogram(unknown, lo, hi, bins),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub score_kind: ScoreKind,
    pub accuracy: f64,
    /// `None` when there are no unknown samples.
    pub auroc: Option<f64>,
    pub oscr: Option<f64>,
    /// `"enabled"`, or `"disabled: no unknown samples"`.
    pub open_set: String,
    pub n_known: usize,
    pub n_unknown: usize,
    pub mean_feature_norm_known: f64,
    pub mean_logit_norm_known: f64,
    pub score_histograms: ScoreHistograms,
    pub oscr_convention: String,
}

fn predictions(output: &ModelOutput, kind: ScoreKind, batch: &LabeledBatch) -> Vec<ScoredSample> {
    let scores = open_set_score(output, kind);
    output
        .logits
        .rows_iter()
        .zip(scores)
        .zip(batch.labels.iter().zip(&batch.is_known))
        .map(|((row, score), (&label, &known))| ScoredSample {
            score,
            predicted_class: argmax(row),
            true_class: label,
            is_known: known,
        })
        .collect()
}

/// Score `samples` with an already computed output.
pub fn score_batch(output: &ModelOutput, batch: &LabeledBatch, kind: ScoreKind) -> Vec<ScoredSample> {
    predictions(output, kind, batch)
}

/// One pass over both evaluation streams.
pub fn evaluate<M: Forward + ?Sized>(
    model: &M,
    eval_known: &LabeledBatch,
    eval_unknown: &LabeledBatch,
    score_kind: ScoreKind,
) -> Result<EvalReport> {
    if eval_known.is_empty() {
        return Err(Error::InvalidArgument("known evaluation stream is empty".into()));
    }
    let known_out = model.forward_chunked(&eval_known.images, EVAL_CHUNK)?;
    let mut samples = predictions(&known_out, score_kind, eval_known);
    let known_scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let mut unknown_scores = Vec::new();
    if !eval_unknown.is_empty() {
        let out = model.forward_chunked(&eval_unknown.images, EVAL_CHUNK)?;
        let u = predictions(&out, score_kind, eval_unknown);
        unknown_scores = u.iter().map(|s| s.score).collect();
        samples.extend(u);
    }
    let accuracy = closed_set_accuracy(&samples);
    let (auroc_v, oscr_v, open_set) = if unknown_scores.is_empty() {
        (None, None, "disabled: no unknown samples".to_string())
    } else {
        (
            Some(auroc(&known_scores, &unknown_scores)?),
            Some(oscr(&samples)?),
            "enabled".to_string(),
        )
    };
    let n = known_out.len() as f64;
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        kind: "eval_report".into(),
        config_digest: String::new(),
        score_kind,
        accuracy,
        auroc: auroc_v,
        oscr: oscr_v,
        open_set,
        n_known: eval_known.len(),
        n_unknown: eval_unknown.len(),
        mean_feature_norm_known: known_out.feature_norm.iter().sum::<f64>() / n,
        mean_logit_norm_known: known_out.logit_norm.iter().sum::<f64>() / n,
        score_histograms: score_histograms(&known_scores, &unknown_scores, SCORE_BINS),
        oscr_convention: OSCR_CONVENTION.into(),
    })
}
