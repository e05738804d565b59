//! Loss terms and their analytic gradients.
//!
//! Everything here works on `f64` matrices. Each loss returns its scalar value
//! together with the gradient w.r.t. the inputs that carry gradient, so the
//! training code can chain them into the network's backward pass.
//!
//! Conventions:
//! - batch losses are means over the batch (or over active samples for the
//!   indicator-gated terms, with the active count reported alongside);
//! - logits are pre-softmax, features are the pooled `R^D` vectors.

use serde::{Deserialize, Serialize};

use crate::augment::MixedBatch;
use crate::error::{Error, Result};
use crate::tensor::{argmax, l2_norm, log_sum_exp, softmax_in_place, Mat};

/// Probability floor for the teacher side of the KL term.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher ‖ student)`, the usual distillation direction.
    TeacherStudent,
}

/// Which mixed samples the relabel term treats as teacher-rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    /// Active when the teacher's top-1 class is neither source class.
    #[default]
    Top1Outside,
    /// Active when neither of the teacher's top-2 classes is a source class.
    Top2Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mu: f64,
    pub eta: f64,
    pub distill_temperature: f64,
    pub mi_temperature: f64,
    pub kl_direction: KlDirection,
    pub verify: VerifyMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 1.0,
            eta: 1.0,
            distill_temperature: 1.0,
            mi_temperature: 0.1,
            kl_direction: KlDirection::StudentTeacher,
            verify: VerifyMode::Top1Outside,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) {
            return Err(Error::config("weights.mu", "must be >= 0"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("weights.eta", "must be >= 0"));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::config("weights.distill_temperature", "must be > 0"));
        }
        if !(self.mi_temperature > 0.0) {
            return Err(Error::config("weights.mi_temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Number of samples contributing to each term in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveCounts {
    pub ce: usize,
    pub mixed_ce: usize,
    pub distill: usize,
    pub cmi: usize,
    pub relabel: usize,
    pub mi: usize,
}

/// Per-term loss values for one optimization step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mixed_ce: f64,
    pub distill: f64,
    pub cmi: f64,
    pub relabel: f64,
    pub mi: f64,
    pub total: f64,
    pub active_counts: ActiveCounts,
    /// Teacher probabilities clamped to [`KL_EPS`] in this step.
    pub kl_clamped: usize,
}

/// Scalar loss and gradient w.r.t. its single differentiable input.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Mat,
}

fn check_finite(m: &Mat, what: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_same(a: &Mat, b: &Mat, context: &'static str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(
            context,
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ))
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Mat {
    let mut m = Mat::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        m.set(i, c, 1.0);
    }
    m
}

/// `−Σ_k t_k · log softmax(z)_k` for each row.
pub fn cross_entropy_per_sample(logits: &Mat, target: &Mat) -> Result<Vec<f64>> {
    check_same(logits, target, "cross-entropy target")?;
    check_finite(logits, "logits")?;
    Ok(logits
        .rows_iter()
        .zip(target.rows_iter())
        .map(|(z, t)| {
            let lse = log_sum_exp(z);
            z.iter().zip(t).map(|(zk, tk)| tk * (lse - zk)).sum()
        })
        .collect())
}

/// Batch-mean soft-target cross-entropy, with gradient w.r.t. the logits.
pub fn cross_entropy_soft(logits: &Mat, target: &Mat) -> Result<Loss> {
    weighted_cross_entropy(logits, target, &vec![1.0 / logits.rows.max(1) as f64; logits.rows])
}

/// `Σ_n w_n · CE(z_n, t_n)`; rows with zero weight get zero gradient.
pub fn weighted_cross_entropy(logits: &Mat, target: &Mat, weights: &[f64]) -> Result<Loss> {
    let per = cross_entropy_per_sample(logits, target)?;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut value = 0.0;
    for n in 0..logits.rows {
        let w = weights[n];
        if w == 0.0 {
            continue;
        }
        value += w * per[n];
        let t = target.row(n);
        let tsum: f64 = t.iter().sum();
        let g = grad.row_mut(n);
        g.copy_from_slice(logits.row(n));
        softmax_in_place(g);
        for (gk, tk) in g.iter_mut().zip(t) {
            *gk = w * (*gk * tsum - tk);
        }
    }
    Ok(Loss { value, grad })
}

/// Cross-entropy against the mixed soft labels `y_m`.
pub fn mixed_ce(logits: &Mat, mixed: &MixedBatch) -> Result<Loss> {
    cross_entropy_soft(logits, &mixed.y_m)
}

/// Output of [`kl_distill`].
#[derive(Debug, Clone, PartialEq)]
pub struct KlLoss {
    pub value: f64,
    /// Gradient w.r.t. the student logits only.
    pub grad: Mat,
    /// Number of teacher probabilities floored at [`KL_EPS`].
    pub clamped: usize,
}

/// Temperature-scaled KL divergence between student and teacher predictions,
/// averaged over the batch. The teacher receives no gradient.
pub fn kl_distill(
    student_logits: &Mat,
    teacher_logits: &Mat,
    temperature: f64,
    direction: KlDirection,
) -> Result<KlLoss> {
    check_same(student_logits, teacher_logits, "teacher logits")?;
    check_finite(student_logits, "student logits")?;
    check_finite(teacher_logits, "teacher logits")?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let b = student_logits.rows;
    let c = student_logits.cols;
    let inv_b = 1.0 / b.max(1) as f64;
    let mut grad = Mat::zeros(b, c);
    let mut value = 0.0;
    let mut clamped = 0;
    let mut ps = vec![0.0; c];
    let mut log_ps = vec![0.0; c];
    let mut log_pt = vec![0.0; c];
    for n in 0..b {
        let zs: Vec<f64> = student_logits.row(n).iter().map(|v| v / temperature).collect();
        let zt: Vec<f64> = teacher_logits.row(n).iter().map(|v| v / temperature).collect();
        let lse_s = log_sum_exp(&zs);
        let lse_t = log_sum_exp(&zt);
        for k in 0..c {
            log_ps[k] = zs[k] - lse_s;
            ps[k] = log_ps[k].exp();
            let lt = zt[k] - lse_t;
            log_pt[k] = if lt.exp() < KL_EPS {
                clamped += 1;
                KL_EPS.ln()
            } else {
                lt
            };
        }
        let g = grad.row_mut(n);
        match direction {
            KlDirection::StudentTeacher => {
                let a: Vec<f64> = (0..c).map(|k| log_ps[k] - log_pt[k]).collect();
                let kl: f64 = (0..c).map(|k| ps[k] * a[k]).sum();
                value += kl;
                for k in 0..c {
                    g[k] = inv_b * ps[k] * (a[k] - kl) / temperature;
                }
            }
            KlDirection::TeacherStudent => {
                let pt: Vec<f64> = log_pt.iter().map(|v| v.exp()).collect();
                let kl: f64 = (0..c).map(|k| pt[k] * (log_pt[k] - log_ps[k])).sum();
                value += kl;
                let ptsum: f64 = pt.iter().sum();
                for k in 0..c {
                    g[k] = inv_b * (ps[k] * ptsum - pt[k]) / temperature;
                }
            }
        }
    }
    Ok(KlLoss {
        value: value * inv_b,
        grad,
        clamped,
    })
}

/// Value and gradients of a contrastive bound, w.r.t. both of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub d_anchors: Mat,
    pub d_candidates: Mat,
}

fn normalize_rows(m: &Mat, what: &'static str) -> Result<(Mat, Vec<f64>)> {
    check_finite(m, what)?;
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let n = l2_norm(m.row(r));
        if n == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "zero-norm row {r} in {what}; normalization undefined"
            )));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull a gradient w.r.t. unit rows `u = v/‖v‖` back to `v`.
fn normalize_backward(unit: &Mat, norms: &[f64], d_unit: &Mat) -> Mat {
    let mut out = Mat::zeros(unit.rows, unit.cols);
    for r in 0..unit.rows {
        let u = unit.row(r);
        let du = d_unit.row(r);
        let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        for (o, (ui, dui)) in out.row_mut(r).iter_mut().zip(u.iter().zip(du)) {
            *o = (dui - ui * dot) / norms[r];
        }
    }
    out
}

/// Per-row InfoNCE terms `ℓ_n = −log softmax_k(⟨â_n, ĉ_k⟩/τ)[t_n]`, combined as
/// `Σ_n w_n ℓ_n`. Rows with zero weight are skipped but still act as
/// candidates. Returns the weighted value, gradients, and the unweighted
/// per-row terms (zero for skipped rows).
pub fn weighted_contrastive(
    anchors: &Mat,
    candidates: &Mat,
    targets: &[usize],
    weights: &[f64],
    temperature: f64,
) -> Result<(ContrastiveLoss, Vec<f64>)> {
    if anchors.cols != candidates.cols {
        return Err(Error::shape("contrastive feature dim", anchors.cols, candidates.cols));
    }
    if targets.len() != anchors.rows || weights.len() != anchors.rows {
        return Err(Error::shape("contrastive targets", anchors.rows, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= candidates.rows) {
        return Err(Error::InvalidArgument(format!(
            "target index {t} out of range for {} candidates",
            candidates.rows
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let (a, a_norms) = normalize_rows(anchors, "anchors")?;
    let (c, c_norms) = normalize_rows(candidates, "candidates")?;
    let k = c.rows;
    let mut da = Mat::zeros(a.rows, a.cols);
    let mut dc = Mat::zeros(c.rows, c.cols);
    let mut value = 0.0;
    let mut terms = vec![0.0; a.rows];
    let mut scores = vec![0.0; k];
    for n in 0..a.rows {
        let w = weights[n];
        if w == 0.0 {
            continue;
        }
        let an = a.row(n);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = an.iter().zip(c.row(j)).map(|(x, y)| x * y).sum::<f64>() / temperature;
        }
        let lse = log_sum_exp(&scores);
        let term = lse - scores[targets[n]];
        terms[n] = term;
        value += w * term;
        // dℓ/ds_j = p_j − [j = t]
        for j in 0..k {
            let mut g = (scores[j] - lse).exp();
            if j == targets[n] {
                g -= 1.0;
            }
            let g = w * g / temperature;
            if g == 0.0 {
                continue;
            }
            let cj = c.row(j).to_vec();
            for (d, cv) in da.row_mut(n).iter_mut().zip(&cj) {
                *d += g * cv;
            }
            for (d, av) in dc.row_mut(j).iter_mut().zip(an) {
                *d += g * av;
            }
        }
    }
    Ok((
        ContrastiveLoss {
            value,
            d_anchors: normalize_backward(&a, &a_norms, &da),
            d_candidates: normalize_backward(&c, &c_norms, &dc),
        },
        terms,
    ))
}

/// In-batch contrastive lower-bound surrogate for `I(anchors; positives)`.
///
/// Row `n` of `positives` is the positive for anchor `n`; every other row is a
/// negative. Minimizing the returned loss maximizes the bound.
pub fn mi_lower_bound(anchors: &Mat, positives: &Mat, temperature: f64) -> Result<ContrastiveLoss> {
    check_same(anchors, positives, "positives")?;
    if anchors.rows == 0 {
        return Err(Error::InvalidArgument("empty feature batch".into()));
    }
    let b = anchors.rows;
    let targets: Vec<usize> = (0..b).collect();
    let weights = vec![1.0 / b as f64; b];
    weighted_contrastive(anchors, positives, &targets, &weights, temperature).map(|(l, _)| l)
}

/// Cross mutual information loss: per-sample `λ·ℓ(x_m, x_i) + (1−λ)·ℓ(x_m, x_j)`
/// averaged over the batch. Gradient flows to the student features only.
pub fn cmi_loss(
    student_mixed: &Mat,
    teacher_raw_i: &Mat,
    teacher_raw_j: &Mat,
    lam: &[f64],
    temperature: f64,
) -> Result<Loss> {
    check_same(student_mixed, teacher_raw_i, "teacher x_i features")?;
    check_same(student_mixed, teacher_raw_j, "teacher x_j features")?;
    let b = student_mixed.rows;
    if lam.len() != b {
        return Err(Error::shape("lambda vector", b, lam.len()));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty feature batch".into()));
    }
    if lam.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidArgument("lambda outside [0, 1]".into()));
    }
    let targets: Vec<usize> = (0..b).collect();
    let inv_b = 1.0 / b as f64;
    let wi: Vec<f64> = lam.iter().map(|l| l * inv_b).collect();
    let wj: Vec<f64> = lam.iter().map(|l| (1.0 - l) * inv_b).collect();
    let (side_i, _) = weighted_contrastive(student_mixed, teacher_raw_i, &targets, &wi, temperature)?;
    let (side_j, _) = weighted_contrastive(student_mixed, teacher_raw_j, &targets, &wj, temperature)?;
    let mut grad = side_i.d_anchors;
    grad.add_scaled(&side_j.d_anchors, 1.0);
    Ok(Loss {
        value: side_i.value + side_j.value,
        grad,
    })
}

/// Target for a rejected mixed sample: `0.5·uniform + 0.5·y_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget {
    pub y_u: Vec<f64>,
}

pub fn two_hot_smooth(y_m: &[f64], classes: usize) -> SmoothedTarget {
    let u = 1.0 / classes as f64;
    SmoothedTarget {
        y_u: y_m.iter().map(|&y| 0.5 * u + 0.5 * y).collect(),
    }
}

/// Indicator-gated loss with its activity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLoss {
    pub value: f64,
    pub grad: Mat,
    pub active: Vec<bool>,
}

impl GatedLoss {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

fn top2(row: &[f64]) -> (usize, usize) {
    let first = argmax(row);
    let mut second = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != first && (second == usize::MAX || v > row[second]) {
            second = i;
        }
    }
    (first, second)
}

/// Mask of mixed samples the teacher rejects under `mode`.
pub fn rejected_by_teacher(teacher_probs: &Mat, c1: &[usize], c2: &[usize], mode: VerifyMode) -> Vec<bool> {
    teacher_probs
        .rows_iter()
        .enumerate()
        .map(|(n, p)| {
            let sources = [c1[n], c2[n]];
            match mode {
                VerifyMode::Top1Outside => !sources.contains(&argmax(p)),
                VerifyMode::Top2Outside => {
                    let (a, b) = top2(p);
                    !sources.contains(&a) && !sources.contains(&b)
                }
            }
        })
        .collect()
}

fn mean_over_active(logits: &Mat, target: &Mat, active: Vec<bool>) -> Result<GatedLoss> {
    let count = active.iter().filter(|&&a| a).count();
    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let weights: Vec<f64> = active.iter().map(|&a| if a { w } else { 0.0 }).collect();
    let loss = weighted_cross_entropy(logits, target, &weights)?;
    Ok(GatedLoss {
        value: loss.value,
        grad: loss.grad,
        active,
    })
}

/// Two-hot relabel loss on teacher-rejected mixed samples, averaged over the
/// active samples.
pub fn relabel_loss(
    student_logits: &Mat,
    mixed: &MixedBatch,
    teacher_probs: &Mat,
    mode: VerifyMode,
) -> Result<GatedLoss> {
    check_same(student_logits, teacher_probs, "teacher probabilities")?;
    check_same(student_logits, &mixed.y_m, "mixed labels")?;
    let c = student_logits.cols;
    let active = rejected_by_teacher(teacher_probs, &mixed.c1, &mixed.c2, mode);
    let mut target = Mat::zeros(mixed.y_m.rows, c);
    for n in 0..target.rows {
        target
            .row_mut(n)
            .copy_from_slice(&two_hot_smooth(mixed.y_m.row(n), c).y_u);
    }
    mean_over_active(student_logits, &target, active)
}

/// Teacher-free MI term output.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMiLoss {
    pub value: f64,
    pub d_mixed: Mat,
    pub d_raw: Mat,
    pub active_i: Vec<bool>,
    pub active_j: Vec<bool>,
}

impl TfMiLoss {
    /// Number of active (sample, side) terms.
    pub fn active_count(&self) -> usize {
        self.active_i.iter().chain(&self.active_j).filter(|&&a| a).count()
    }
}

/// Teacher-free MI maximization between mixed-sample features and the
/// features of their raw sources, gated per side by `p(c) > tau_upper`.
///
/// `raw_feats` are the features of the raw batch; `src_i`/`src_j` index into
/// it. Averaged over active (sample, side) terms; gradients reach both the
/// mixed and the raw features.
#[allow(clippy::too_many_arguments)]
pub fn tf_mi_loss(
    mixed_feats: &Mat,
    raw_feats: &Mat,
    src_i: &[usize],
    src_j: &[usize],
    probs_mixed: &Mat,
    c1: &[usize],
    c2: &[usize],
    tau_upper: f64,
    temperature: f64,
) -> Result<TfMiLoss> {
    let bm = mixed_feats.rows;
    if probs_mixed.rows != bm || src_i.len() != bm || src_j.len() != bm || c1.len() != bm || c2.len() != bm {
        return Err(Error::shape("teacher-free MI inputs", bm, probs_mixed.rows));
    }
    let active_i: Vec<bool> = (0..bm).map(|n| probs_mixed.get(n, c1[n]) > tau_upper).collect();
    let active_j: Vec<bool> = (0..bm).map(|n| probs_mixed.get(n, c2[n]) > tau_upper).collect();
    let count = active_i.iter().chain(&active_j).filter(|&&a| a).count();
    let mut d_mixed = Mat::zeros(bm, mixed_feats.cols);
    let mut d_raw = Mat::zeros(raw_feats.rows, raw_feats.cols);
    if count == 0 {
        return Ok(TfMiLoss {
            value: 0.0,
            d_mixed,
            d_raw,
            active_i,
            active_j,
        });
    }
    let w = 1.0 / count as f64;
    let mut value = 0.0;
    for (active, src) in [(&active_i, src_i), (&active_j, src_j)] {
        if !active.iter().any(|&a| a) {
            continue;
        }
        let weights: Vec<f64> = active.iter().map(|&a| if a { w } else { 0.0 }).collect();
        let (side, _) = weighted_contrastive(mixed_feats, raw_feats, src, &weights, temperature)?;
        value += side.value;
        d_mixed.add_scaled(&side.d_anchors, 1.0);
        d_raw.add_scaled(&side.d_candidates, 1.0);
    }
    Ok(TfMiLoss {
        value,
        d_mixed,
        d_raw,
        active_i,
        active_j,
    })
}

/// Uniform-target loss on mixed samples whose max probability is below
/// `tau_lower`, averaged over the active samples.
pub fn tf_relabel_loss(logits_mixed: &Mat, probs_mixed: &Mat, tau_lower: f64, classes: usize) -> Result<GatedLoss> {
    check_same(logits_mixed, probs_mixed, "mixed probabilities")?;
    if logits_mixed.cols != classes {
        return Err(Error::shape("class count", classes, logits_mixed.cols));
    }
    let active: Vec<bool> = probs_mixed
        .rows_iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max) < tau_lower)
        .collect();
    let mut target = Mat::zeros(logits_mixed.rows, classes);
    target.data.iter_mut().for_each(|v| *v = 1.0 / classes as f64);
    mean_over_active(logits_mixed, &target, active)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let l = cross_entropy_soft(&mat(&[&[0.3, 0.3, 0.3, 0.3]]), &one_hot(&[2], 4)).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_logits() {
        // log(1 + 2e^-10), evaluated independently with ln_1p
        let expected = (2.0 * (-10f64).exp()).ln_1p();
        let l = cross_entropy_soft(&mat(&[&[10.0, 0.0, 0.0]]), &one_hot(&[0], 3)).unwrap();
        assert!((l.value - expected).abs() < 1e-15);
        assert!((l.value - 9.0800e-5).abs() < 1e-8);
    }

    #[test]
    fn ce_rejects_non_finite_logits() {
        let r = cross_entropy_soft(&mat(&[&[f64::NAN, 0.0]]), &one_hot(&[0], 2));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn kl_hand_value() {
        // student probs [0.5, 0.5], teacher [0.9, 0.1]
        let s = mat(&[&[0.0, 0.0]]);
        let t = mat(&[&[0.9f64.ln(), 0.1f64.ln()]]);
        let kl = kl_distill(&s, &t, 1.0, KlDirection::StudentTeacher).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl.value - expected).abs() < 1e-12);
        assert!((kl.value - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_clamps_saturated_teacher() {
        let s = mat(&[&[0.0, 0.0]]);
        let t = mat(&[&[0.0, -100.0]]);
        let kl = kl_distill(&s, &t, 1.0, KlDirection::StudentTeacher).unwrap();
        assert_eq!(kl.clamped, 1);
        assert!(kl.value.is_finite());
    }

    #[test]
    fn mi_single_row_is_zero_and_identical_rows_give_ln_b() {
        let one = mat(&[&[1.0, 2.0]]);
        assert_eq!(mi_lower_bound(&one, &one, 0.1).unwrap().value, 0.0);
        let same = Mat::from_vec(8, 3, [0.2, -1.0, 0.5].repeat(8)).unwrap();
        let l = mi_lower_bound(&same, &same, 0.1).unwrap();
        assert!((l.value - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_zero_row_is_an_error() {
        let a = mat(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(mi_lower_bound(&a, &a, 0.1).is_err());
    }

    #[test]
    fn two_hot_examples() {
        let y = two_hot_smooth(&[0.6, 0.4, 0.0, 0.0], 4).y_u;
        for (a, b) in y.iter().zip([0.425, 0.325, 0.125, 0.125]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(two_hot_smooth(&[1.0, 0.0], 2).y_u, vec![0.75, 0.25]);
    }

    #[test]
    fn top2_mode_is_stricter_than_top1() {
        let p = mat(&[&[0.5, 0.3, 0.2], &[0.5, 0.2, 0.3]]);
        // sources {1, 2}: top-1 is class 0 for both rows
        let c1 = [1, 1];
        let c2 = [2, 2];
        assert_eq!(rejected_by_teacher(&p, &c1, &c2, VerifyMode::Top1Outside), vec![true, true]);
        assert_eq!(rejected_by_teacher(&p, &c1, &c2, VerifyMode::Top2Outside), vec![false, false]);
    }

    #[test]
    fn tf_relabel_uniform_prediction_is_ln_c() {
        let z = mat(&[&[0.0; 5]]);
        let p = crate::tensor::softmax_rows(&z);
        let l = tf_relabel_loss(&z, &p, 0.5, 5).unwrap();
        assert_eq!(l.active, vec![true]);
        assert!((l.value - 5f64.ln()).abs() < 1e-12);
        assert!(l.grad.data.iter().all(|g| g.abs() < 1e-15));
    }
}
