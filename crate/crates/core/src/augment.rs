//! Single-sample (CutOut, AugMix-style) and multi-sample (CutMix, MixUp)
//! augmentation.
//!
//! The multi-sample operators return a [`MixedBatch`] that records, per mixed
//! image, which raw images it came from, the realized mixing ratio `λ`, the
//! paste mask and the soft label `y_m = λ·onehot(c1) + (1−λ)·onehot(c2)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::{Images, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Cutmix,
    Mixup,
    Cutout,
    AugmixLike,
    #[default]
    None,
}

impl AugmentKind {
    pub fn is_multi_sample(self) -> bool {
        matches!(self, AugmentKind::Cutmix | AugmentKind::Mixup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Symmetric Beta(α, α) parameter for λ.
    pub alpha: f64,
    pub cutout_size: usize,
    /// Mixed samples per raw sample in teacher-free mix batches.
    pub mix_ratio_per_batch: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::None,
            alpha: 1.0,
            cutout_size: 8,
            mix_ratio_per_batch: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("augment.alpha", "must be a positive real"));
        }
        if !(self.mix_ratio_per_batch >= 0.0) {
            return Err(Error::config("augment.mix_ratio_per_batch", "must be >= 0"));
        }
        if self.kind == AugmentKind::Cutout && self.cutout_size == 0 {
            return Err(Error::config("augment.cutout_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Images,
    pub src_i: Vec<usize>,
    pub src_j: Vec<usize>,
    pub lam: Vec<f64>,
    /// `B_m × H × W`; true where the pixel comes from `x_i`.
    pub mask: Vec<bool>,
    pub y_m: Mat,
    pub c1: Vec<usize>,
    pub c2: Vec<usize>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lam.is_empty()
    }

    pub fn empty(images_shape: crate::tensor::ImageShape, classes: usize) -> Self {
        Self {
            images: Images::zeros(0, images_shape),
            src_i: vec![],
            src_j: vec![],
            lam: vec![],
            mask: vec![],
            y_m: Mat::zeros(0, classes),
            c1: vec![],
            c2: vec![],
        }
    }

    /// Fraction of mask entries taken from `x_i` for sample `n`.
    pub fn mask_fraction(&self, n: usize) -> f64 {
        let p = self.images.shape.pixels();
        let m = &self.mask[n * p..(n + 1) * p];
        m.iter().filter(|&&v| v).count() as f64 / p as f64
    }
}

/// Half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Box of side `sqrt(1−λ)` times the image side, centred uniformly and
    /// clipped at the borders.
    pub fn sample<R: Rng + ?Sized>(lam: f64, height: usize, width: usize, rng: &mut R) -> Self {
        let ratio = (1.0 - lam).max(0.0).sqrt();
        let cut_h = (height as f64 * ratio) as isize;
        let cut_w = (width as f64 * ratio) as isize;
        let cy = rng.random_range(0..height) as isize;
        let cx = rng.random_range(0..width) as isize;
        let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        Self {
            y0: clip(cy - cut_h / 2, height),
            y1: clip(cy + cut_h / 2, height),
            x0: clip(cx - cut_w / 2, width),
            x1: clip(cx + cut_w / 2, width),
        }
    }
}

fn known_labels(batch: &LabeledBatch) -> Result<Vec<usize>> {
    batch
        .labels
        .iter()
        .map(|&l| {
            usize::try_from(l).map_err(|_| {
                Error::InvalidArgument("cannot mix a batch containing unknown-class samples".into())
            })
        })
        .collect()
}

fn soft_labels(c1: &[usize], c2: &[usize], lam: &[f64], classes: usize) -> Mat {
    let mut y = Mat::zeros(c1.len(), classes);
    for n in 0..c1.len() {
        let row = y.row_mut(n);
        row[c1[n]] += lam[n];
        row[c2[n]] += 1.0 - lam[n];
    }
    y
}

fn beta(alpha: f64) -> Result<Beta<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("beta({alpha}): {e}")))
}

fn check_pairable(batch: &LabeledBatch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "multi-sample augmentation needs at least 2 samples, got {}",
            batch.len()
        )));
    }
    Ok(())
}

/// Paste `boxes[n]` of `x_{src_j[n]}` onto `x_{src_i[n]}`; `λ` is the area
/// left to `x_i`.
pub fn apply_cutmix(
    batch: &LabeledBatch,
    src_i: &[usize],
    src_j: &[usize],
    boxes: &[CutBox],
    classes: usize,
) -> Result<MixedBatch> {
    let labels = known_labels(batch)?;
    let shape = batch.images.shape;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let bm = src_i.len();
    let mut images = Images::zeros(bm, shape);
    let mut mask = vec![true; bm * h * w];
    let mut lam = Vec::with_capacity(bm);
    for n in 0..bm {
        let bx = boxes[n];
        if bx.y1 > h || bx.x1 > w || bx.y0 > bx.y1 || bx.x0 > bx.x1 {
            return Err(Error::InvalidArgument(format!("box {bx:?} outside {h}x{w}")));
        }
        let xi = batch.images.image(src_i[n]);
        let xj = batch.images.image(src_j[n]);
        let out = images.image_mut(n);
        out.copy_from_slice(xi);
        for y in bx.y0..bx.y1 {
            for x in bx.x0..bx.x1 {
                let p = (y * w + x) * ch;
                out[p..p + ch].copy_from_slice(&xj[p..p + ch]);
                mask[n * h * w + y * w + x] = false;
            }
        }
        lam.push(1.0 - bx.area() as f64 / (h * w) as f64);
    }
    let c1: Vec<usize> = src_i.iter().map(|&i| labels[i]).collect();
    let c2: Vec<usize> = src_j.iter().map(|&j| labels[j]).collect();
    let y_m = soft_labels(&c1, &c2, &lam, classes);
    Ok(MixedBatch {
        images,
        src_i: src_i.to_vec(),
        src_j: src_j.to_vec(),
        lam,
        mask,
        y_m,
        c1,
        c2,
    })
}

/// Pixelwise convex combination `λ·x_i + (1−λ)·x_j`.
pub fn apply_mixup(
    batch: &LabeledBatch,
    src_i: &[usize],
    src_j: &[usize],
    lam: &[f64],
    classes: usize,
) -> Result<MixedBatch> {
    let labels = known_labels(batch)?;
    let shape = batch.images.shape;
    let bm = src_i.len();
    let mut images = Images::zeros(bm, shape);
    for n in 0..bm {
        let l = lam[n] as f32;
        let xi = batch.images.image(src_i[n]);
        let xj = batch.images.image(src_j[n]);
        for ((o, a), b) in images.image_mut(n).iter_mut().zip(xi).zip(xj) {
            *o = l * a + (1.0 - l) * b;
        }
    }
    let c1: Vec<usize> = src_i.iter().map(|&i| labels[i]).collect();
    let c2: Vec<usize> = src_j.iter().map(|&j| labels[j]).collect();
    Ok(MixedBatch {
        images,
        src_i: src_i.to_vec(),
        src_j: src_j.to_vec(),
        lam: lam.to_vec(),
        mask: vec![true; bm * shape.pixels()],
        y_m: soft_labels(&c1, &c2, lam, classes),
        c1,
        c2,
    })
}

fn identity_and_permutation<R: Rng + ?Sized>(b: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let src_i: Vec<usize> = (0..b).collect();
    let mut src_j = src_i.clone();
    src_j.shuffle(rng);
    (src_i, src_j)
}

fn mix_pairs<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    src_i: &[usize],
    src_j: &[usize],
    kind: AugmentKind,
    alpha: f64,
    classes: usize,
    rng: &mut R,
) -> Result<MixedBatch> {
    let dist = beta(alpha)?;
    let shape = batch.images.shape;
    match kind {
        AugmentKind::Cutmix => {
            let boxes: Vec<CutBox> = src_i
                .iter()
                .map(|_| {
                    let lam = dist.sample(rng);
                    CutBox::sample(lam, shape.height, shape.width, rng)
                })
                .collect();
            apply_cutmix(batch, src_i, src_j, &boxes, classes)
        }
        AugmentKind::Mixup => {
            let lam: Vec<f64> = src_i.iter().map(|_| dist.sample(rng)).collect();
            apply_mixup(batch, src_i, src_j, &lam, classes)
        }
        other => Err(Error::InvalidArgument(format!(
            "{other:?} is not a multi-sample augmentation"
        ))),
    }
}

/// CutMix with a random partner permutation and one box per sample.
pub fn cutmix<R: Rng + ?Sized>(batch: &LabeledBatch, alpha: f64, classes: usize, rng: &mut R) -> Result<MixedBatch> {
    check_pairable(batch)?;
    let (src_i, src_j) = identity_and_permutation(batch.len(), rng);
    mix_pairs(batch, &src_i, &src_j, AugmentKind::Cutmix, alpha, classes, rng)
}

/// MixUp with a random partner permutation and one λ per sample.
pub fn mixup<R: Rng + ?Sized>(batch: &LabeledBatch, alpha: f64, classes: usize, rng: &mut R) -> Result<MixedBatch> {
    check_pairable(batch)?;
    let (src_i, src_j) = identity_and_permutation(batch.len(), rng);
    mix_pairs(batch, &src_i, &src_j, AugmentKind::Mixup, alpha, classes, rng)
}

/// Dispatch to [`cutmix`] or [`mixup`].
pub fn mix<R: Rng + ?Sized>(batch: &LabeledBatch, cfg: &AugmentConfig, classes: usize, rng: &mut R) -> Result<MixedBatch> {
    match cfg.kind {
        AugmentKind::Cutmix => cutmix(batch, cfg.alpha, classes, rng),
        AugmentKind::Mixup => mixup(batch, cfg.alpha, classes, rng),
        other => Err(Error::InvalidArgument(format!(
            "{other:?} is not a multi-sample augmentation"
        ))),
    }
}

/// Zero one `size × size` square per image, placed uniformly inside the image.
pub fn cutout<R: Rng + ?Sized>(batch: &LabeledBatch, size: usize, rng: &mut R) -> Result<LabeledBatch> {
    let shape = batch.images.shape;
    if size == 0 || size > shape.height.min(shape.width) {
        return Err(Error::InvalidArgument(format!(
            "cutout size {size} outside 1..={}",
            shape.height.min(shape.width)
        )));
    }
    let mut out = batch.clone();
    let (w, ch) = (shape.width, shape.channels);
    for n in 0..out.len() {
        let y0 = rng.random_range(0..=shape.height - size);
        let x0 = rng.random_range(0..=shape.width - size);
        let img = out.images.image_mut(n);
        for y in y0..y0 + size {
            let row = (y * w + x0) * ch;
            img[row..row + size * ch].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

fn flip_horizontal(img: &[f32], h: usize, w: usize, ch: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * ch;
            let d = (y * w + (w - 1 - x)) * ch;
            out[d..d + ch].copy_from_slice(&img[s..s + ch]);
        }
    }
    out
}

/// Rotation about the centre with nearest-neighbour sampling; outside is 0.
fn rotate(img: &[f32], h: usize, w: usize, ch: usize, angle: f64) -> Vec<f32> {
    let (s, c) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (c * dy - s * dx + cy).round();
            let sx = (s * dy + c * dx + cx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                let src = (sy as usize * w + sx as usize) * ch;
                let dst = (y * w + x) * ch;
                out[dst..dst + ch].copy_from_slice(&img[src..src + ch]);
            }
        }
    }
    out
}

fn translate(img: &[f32], h: usize, w: usize, ch: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                let src = (sy as usize * w + sx as usize) * ch;
                let dst = (y * w + x) * ch;
                out[dst..dst + ch].copy_from_slice(&img[src..src + ch]);
            }
        }
    }
    out
}

/// A chain of 1–3 random flip/rotate/translate ops, blended back with the
/// original image by a uniform weight.
pub fn augmix_like<R: Rng + ?Sized>(batch: &LabeledBatch, rng: &mut R) -> LabeledBatch {
    let shape = batch.images.shape;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut out = batch.clone();
    let max_shift = (h.min(w) / 8).max(1) as i64;
    for n in 0..out.len() {
        let orig = batch.images.image(n);
        let mut cur = orig.to_vec();
        for _ in 0..rng.random_range(1..=3) {
            cur = match rng.random_range(0..3) {
                0 => flip_horizontal(&cur, h, w, ch),
                1 => rotate(&cur, h, w, ch, rng.random_range(-0.5..0.5)),
                _ => translate(
                    &cur,
                    h,
                    w,
                    ch,
                    rng.random_range(-max_shift..=max_shift) as isize,
                    rng.random_range(-max_shift..=max_shift) as isize,
                ),
            };
        }
        let m: f32 = rng.random_range(0.0..1.0);
        for ((o, a), b) in out.images.image_mut(n).iter_mut().zip(orig).zip(&cur) {
            *o = m * a + (1.0 - m) * b;
        }
    }
    out
}

/// Label-preserving augmentation selected by `cfg.kind`.
pub fn apply_single_sample<R: Rng + ?Sized>(batch: &LabeledBatch, cfg: &AugmentConfig, rng: &mut R) -> Result<LabeledBatch> {
    match cfg.kind {
        AugmentKind::None => Ok(batch.clone()),
        AugmentKind::Cutout => cutout(batch, cfg.cutout_size, rng),
        AugmentKind::AugmixLike => Ok(augmix_like(batch, rng)),
        other => Err(Error::InvalidArgument(format!(
            "{other:?} is not a single-sample augmentation"
        ))),
    }
}

/// Raw batch plus `round(ratio · B)` mixed samples, each with its own λ.
///
/// Every raw sample serves as `x_i` in turn; partners come from a fresh
/// permutation per pass over the batch.
pub fn build_mix_batch<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    cfg: &AugmentConfig,
    classes: usize,
    rng: &mut R,
) -> Result<(LabeledBatch, MixedBatch)> {
    if !cfg.kind.is_multi_sample() {
        return Err(Error::InvalidArgument(format!(
            "mix batches need cutmix or mixup, got {:?}",
            cfg.kind
        )));
    }
    let b = batch.len();
    let bm = (cfg.mix_ratio_per_batch * b as f64).round() as usize;
    if bm == 0 {
        return Ok((batch.clone(), MixedBatch::empty(batch.images.shape, classes)));
    }
    check_pairable(batch)?;
    let mut src_i = Vec::with_capacity(bm);
    let mut src_j = Vec::with_capacity(bm);
    while src_i.len() < bm {
        let (pi, pj) = identity_and_permutation(b, rng);
        let take = (bm - src_i.len()).min(b);
        src_i.extend_from_slice(&pi[..take]);
        src_j.extend_from_slice(&pj[..take]);
    }
    let mixed = mix_pairs(batch, &src_i, &src_j, cfg.kind, cfg.alpha, classes, rng)?;
    Ok((batch.clone(), mixed))
}
