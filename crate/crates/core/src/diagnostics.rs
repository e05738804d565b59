//! Analysis toolkit: norm statistics, class-pair discrepancy, teacher audits
//! and uncertainty histograms.
//!
//! Every operation has an output-level form (taking a [`ModelOutput`]) that
//! is a pure function of the logits, plus a thin wrapper running a model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, MixedBatch};
use crate::data::{make_batches, mix_seed, LabeledBatch, SplitSeed};
use crate::error::{Error, Result};
use crate::metrics::{histogram, uncertainty_score, ScoreHistograms};
use crate::model::{Forward, ModelOutput};
use crate::tensor::{argmax, Mat};

const CHUNK: usize = 256;

/// Threshold above which a teacher prediction counts as over-confident.
pub const OVERCONFIDENT_PROB: f64 = 0.95;

pub const DISCREPANCY_DEFINITION: &str = "known row a: mean over class-a samples of (logit_a - logit_b) for known b, \
     (logit_a - mean MLS of unknown group b) for unknown b; unknown row u: mean over group-u samples of \
     (max logit - logit_b) for known b, (mean MLS of u - mean MLS of b) for unknown b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub split: Split,
    pub n_samples: usize,
    /// Mean of per-sample `‖Φ(x)‖`.
    pub mean_feature_norm: f64,
    /// Mean of per-sample `‖WΦ(x)‖`.
    pub mean_logit_norm: f64,
    /// Per-class mean feature norms (knowns only; `None` for empty classes).
    pub per_class_feature_norm: Vec<Option<f64>>,
    pub per_class_logit_norm: Vec<Option<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn grouped_means(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; n_groups];
    let mut count = vec![0usize; n_groups];
    for (&v, &g) in values.iter().zip(groups) {
        sum[g] += v;
        count[g] += 1;
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

pub fn norm_stats_from_output(output: &ModelOutput, labels: &[i32], split: Split) -> Result<NormStats> {
    if output.is_empty() {
        return Err(Error::InvalidArgument("norm statistics need a non-empty stream".into()));
    }
    let (per_f, per_l) = match split {
        Split::Known => {
            let classes = output.logits.cols;
            let groups: Vec<usize> = labels
                .iter()
                .map(|&l| {
                    usize::try_from(l)
                        .ok()
                        .filter(|&c| c < classes)
                        .ok_or_else(|| Error::InvalidArgument(format!("label {l} is not a known class")))
                })
                .collect::<Result<_>>()?;
            (
                grouped_means(&output.feature_norm, &groups, classes),
                grouped_means(&output.logit_norm, &groups, classes),
            )
        }
        Split::Unknown => (Vec::new(), Vec::new()),
    };
    Ok(NormStats {
        split,
        n_samples: output.len(),
        mean_feature_norm: mean(&output.feature_norm),
        mean_logit_norm: mean(&output.logit_norm),
        per_class_feature_norm: per_f,
        per_class_logit_norm: per_l,
    })
}

pub fn norm_stats<M: Forward + ?Sized>(model: &M, stream: &LabeledBatch, split: Split) -> Result<NormStats> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("norm statistics need a non-empty stream".into()));
    }
    let out = model.forward_chunked(&stream.images, CHUNK)?;
    norm_stats_from_output(&out, &stream.labels, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMatrix {
    /// Row/column names: known class ids first, then unknown group ids.
    pub labels: Vec<String>,
    pub n_known: usize,
    /// `None` marks an entry whose row or column group has no samples.
    pub entries: Vec<Vec<Option<f64>>>,
    pub definition_tag: String,
}

impl DiscrepancyMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Mean over present off-diagonal entries of the known × known block.
    pub fn mean_known_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.n_known)
            .flat_map(|a| (0..self.n_known).filter(move |&b| b != a).map(move |b| (a, b)))
            .filter_map(|(a, b)| self.entries[a][b])
            .collect();
        (!vals.is_empty()).then(|| mean(&vals))
    }
}

/// Build the matrix from known-sample logits (with class labels) and
/// unknown-sample logits (with group ids `0..n_unknown_groups`).
pub fn discrepancy_from_logits(
    known_logits: &Mat,
    known_labels: &[usize],
    unknown_logits: &Mat,
    unknown_groups: &[usize],
    labels: Vec<String>,
) -> Result<DiscrepancyMatrix> {
    let c = known_logits.cols;
    if unknown_logits.rows > 0 && unknown_logits.cols != c {
        return Err(Error::shape("unknown logits columns", c, unknown_logits.cols));
    }
    if known_labels.len() != known_logits.rows || unknown_groups.len() != unknown_logits.rows {
        return Err(Error::InvalidArgument("labels and logits disagree in length".into()));
    }
    let n_unknown = labels.len().checked_sub(c).ok_or_else(|| {
        Error::InvalidArgument(format!("{} labels for {c} known classes", labels.len()))
    })?;
    if let Some(&g) = unknown_groups.iter().find(|&&g| g >= n_unknown) {
        return Err(Error::InvalidArgument(format!("unknown group {g} out of range")));
    }
    let n = c + n_unknown;

    // Row sums over the logit columns, per group.
    let mut margin = vec![vec![0.0; c]; n];
    let mut own = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut add = |g: usize, row: &[f64], anchor: f64| {
        for (m, &l) in margin[g].iter_mut().zip(row) {
            *m += anchor - l;
        }
        own[g] += anchor;
        count[g] += 1;
    };
    for (row, &a) in known_logits.rows_iter().zip(known_labels) {
        if a >= c {
            return Err(Error::InvalidArgument(format!("class {a} out of range")));
        }
        add(a, row, row[a]);
    }
    for (row, &u) in unknown_logits.rows_iter().zip(unknown_groups) {
        add(c + u, row, row[argmax(row)]);
    }
    // own[g] / count[g] is the mean anchor logit of group g: logit_a for a
    // known class, the MLS for an unknown group.
    let anchor: Vec<Option<f64>> = (0..n).map(|g| (count[g] > 0).then(|| own[g] / count[g] as f64)).collect();
    let mut entries = vec![vec![None; n]; n];
    for a in 0..n {
        if count[a] == 0 {
            continue;
        }
        for b in 0..n {
            entries[a][b] = if b < c {
                Some(margin[a][b] / count[a] as f64)
            } else {
                anchor[b].map(|mls_b| anchor[a].unwrap() - mls_b)
            };
        }
        entries[a][a] = Some(0.0);
    }
    Ok(DiscrepancyMatrix {
        labels,
        n_known: c,
        entries,
        definition_tag: DISCREPANCY_DEFINITION.into(),
    })
}

/// `known_class_ids` names the rows; `unknown_class_ids[i]` is the dataset
/// class of unknown sample `i`.
pub fn discrepancy_matrix<M: Forward + ?Sized>(
    model: &M,
    eval_known: &LabeledBatch,
    eval_unknown: &LabeledBatch,
    known_class_ids: &[u32],
    unknown_class_ids: &[u32],
) -> Result<DiscrepancyMatrix> {
    if eval_known.is_empty() || eval_unknown.is_empty() {
        return Err(Error::InvalidArgument("discrepancy matrix needs both streams non-empty".into()));
    }
    if unknown_class_ids.len() != eval_unknown.len() {
        return Err(Error::shape("unknown class ids", eval_unknown.len(), unknown_class_ids.len()));
    }
    let mut groups_sorted: Vec<u32> = unknown_class_ids.to_vec();
    groups_sorted.sort_unstable();
    groups_sorted.dedup();
    let groups: Vec<usize> = unknown_class_ids
        .iter()
        .map(|id| groups_sorted.binary_search(id).unwrap())
        .collect();
    let labels = known_class_ids
        .iter()
        .map(|c| c.to_string())
        .chain(groups_sorted.iter().map(|u| format!("u{u}")))
        .collect();
    let k = model.forward_chunked(&eval_known.images, CHUNK)?;
    let u = model.forward_chunked(&eval_unknown.images, CHUNK)?;
    discrepancy_from_logits(&k.logits, &eval_known.class_indices()?, &u.logits, &groups, labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherAudit {
    pub n_target: usize,
    pub n_samples: usize,
    pub n_overconfident: usize,
    pub n_wrong: usize,
    pub n_both: usize,
    /// The stream ran out before `n_target` samples.
    pub exhausted: bool,
}

/// Count over-confident and wrong predictions among the first `n_target`
/// rows. Ties in the argmax resolve to the lowest class index.
pub fn audit_probs(probs: &Mat, c1: &[usize], c2: &[usize], n_target: usize) -> Result<TeacherAudit> {
    if n_target == 0 {
        return Err(Error::InvalidArgument("n_target must be >= 1".into()));
    }
    if c1.len() != probs.rows || c2.len() != probs.rows {
        return Err(Error::shape("audit labels", probs.rows, c1.len().min(c2.len())));
    }
    let n = probs.rows.min(n_target);
    let mut a = TeacherAudit {
        n_target,
        n_samples: n,
        n_overconfident: 0,
        n_wrong: 0,
        n_both: 0,
        exhausted: n < n_target,
    };
    for i in 0..n {
        let row = probs.row(i);
        let top = argmax(row);
        let over = row[top] > OVERCONFIDENT_PROB;
        let wrong = top != c1[i] && top != c2[i];
        a.n_overconfident += over as usize;
        a.n_wrong += wrong as usize;
        a.n_both += (over && wrong) as usize;
    }
    Ok(a)
}

/// Run the frozen teacher over mixed batches until `n_target` samples.
pub fn teacher_audit<M, I>(teacher: &M, mixed_stream: I, n_target: usize) -> Result<TeacherAudit>
where
    M: Forward + ?Sized,
    I: IntoIterator<Item = Result<MixedBatch>>,
{
    if n_target == 0 {
        return Err(Error::InvalidArgument("n_target must be >= 1".into()));
    }
    let classes = teacher.architecture().num_classes;
    let mut probs = Mat::zeros(0, classes);
    let (mut c1, mut c2) = (Vec::new(), Vec::new());
    for batch in mixed_stream {
        if c1.len() >= n_target {
            break;
        }
        let batch = batch?;
        let out = teacher.forward_chunked(&batch.images, CHUNK)?;
        probs.rows += out.probs.rows;
        probs.data.extend(out.probs.data);
        c1.extend(batch.c1);
        c2.extend(batch.c2);
    }
    audit_probs(&probs, &c1, &c2, n_target)
}

/// Endless CutMix/MixUp batches drawn from `source`, reshuffled every pass.
pub fn mixed_stream<'a>(
    source: &'a LabeledBatch,
    cfg: &'a AugmentConfig,
    classes: usize,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Result<MixedBatch>> + 'a {
    let split = SplitSeed::new(seed);
    (0u64..).flat_map(move |pass| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xa0d1_7000 + pass));
        let batches = match make_batches(source, batch_size, split, pass, true) {
            Ok(b) => b,
            Err(e) => return vec![Err(e)],
        };
        batches
            .into_iter()
            .filter(|b| b.len() >= 2)
            .map(|b| augment::mix(&b, cfg, classes, &mut rng))
            .collect::<Vec<_>>()
    })
}

/// Histograms of `1 − max p` over `[0, 1 − 1/C]`.
pub fn uncertainty_histogram_from_outputs(
    known: &ModelOutput,
    unknown: &ModelOutput,
    classes: usize,
    n_bins: usize,
) -> Result<ScoreHistograms> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument("n_bins must be >= 2".into()));
    }
    let hi = 1.0 - 1.0 / classes as f64;
    let edges = (0..=n_bins).map(|i| hi * i as f64 / n_bins as f64).collect();
    Ok(ScoreHistograms {
        edges,
        known: histogram(&uncertainty_score(known), 0.0, hi, n_bins),
        unknown: histogram(&uncertainty_score(unknown), 0.0, hi, n_bins),
    })
}

pub fn uncertainty_histogram<M: Forward + ?Sized>(
    model: &M,
    eval_known: &LabeledBatch,
    eval_unknown: &LabeledBatch,
    n_bins: usize,
) -> Result<ScoreHistograms> {
    let classes = model.architecture().num_classes;
    let dim = model.architecture().feature_dim();
    let run = |b: &LabeledBatch| -> Result<ModelOutput> {
        if b.is_empty() {
            Ok(ModelOutput::empty(dim, classes))
        } else {
            model.forward_chunked(&b.images, CHUNK)
        }
    };
    uncertainty_histogram_from_outputs(&run(eval_known)?, &run(eval_unknown)?, classes, n_bins)
}
