//! Feature extractor + bias-free linear head.
//!
//! The reference backbone is four `conv3x3 → group-norm → ReLU → max-pool`
//! blocks followed by global average pooling, giving the feature vector
//! `Φ(x) ∈ R^D`. The head is a plain `C × D` matrix so that
//! `logits = W·Φ(x)` holds exactly.
//!
//! All tensors are NHWC. Parameters live in a flat, ordered list of named
//! buffers, which keeps the optimizer, checkpoint and finite-difference code
//! independent of the layer structure.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, l2_norm, softmax_rows, ImageShape, Images, Mat, Real, Trans};

const GN_EPS: f64 = 1e-5;
const MIN_SIDE: usize = 16;

/// Everything needed to rebuild a classifier's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: ImageShape,
    /// Output channels per block; the last entry is the feature dimension `D`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel input normalization applied inside `forward`.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![T::ZERO; n],
        }
    }
}

/// Per-parameter gradient buffers, index-aligned with [`Classifier::params`].
pub type Grads<T> = Vec<Vec<T>>;

/// Output of one forward pass, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub features: Mat,
    pub logits: Mat,
    pub probs: Mat,
    pub feature_norm: Vec<f64>,
    pub logit_norm: Vec<f64>,
}

impl ModelOutput {
    pub fn from_parts(features: Mat, logits: Mat) -> Self {
        let probs = softmax_rows(&logits);
        let feature_norm = features.rows_iter().map(l2_norm).collect();
        let logit_norm = logits.rows_iter().map(l2_norm).collect();
        Self {
            features,
            logits,
            probs,
            feature_norm,
            logit_norm,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.rows
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows == 0
    }

    /// Concatenate along the batch axis.
    pub fn append(&mut self, other: ModelOutput) {
        fn cat(a: &mut Mat, b: Mat) {
            if a.rows == 0 {
                *a = b;
            } else {
                a.rows += b.rows;
                a.data.extend(b.data);
            }
        }
        cat(&mut self.features, other.features);
        cat(&mut self.logits, other.logits);
        cat(&mut self.probs, other.probs);
        self.feature_norm.extend(other.feature_norm);
        self.logit_norm.extend(other.logit_norm);
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self::from_parts(Mat::zeros(0, dim), Mat::zeros(0, classes))
    }
}

/// Anything that can score a batch of images.
pub trait Forward {
    fn architecture(&self) -> &Architecture;
    fn forward(&self, images: &Images) -> Result<ModelOutput>;

    /// Forward in fixed-size chunks; results are identical to one large pass
    /// because every layer is per-sample.
    fn forward_chunked(&self, images: &Images, chunk: usize) -> Result<ModelOutput> {
        let arch = self.architecture();
        let mut out = ModelOutput::empty(arch.feature_dim(), arch.num_classes);
        let n = images.batch();
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            out.append(self.forward(&images.select(&idx))?);
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T: Real = f32> {
    arch: Arc<Architecture>,
    params: Vec<Param<T>>,
}

/// Spatial extent of the activation entering each block.
fn block_sides(input: ImageShape, blocks: usize) -> Vec<(usize, usize)> {
    let mut sides = Vec::with_capacity(blocks);
    let (mut h, mut w) = (input.height, input.width);
    for _ in 0..blocks {
        sides.push((h, w));
        h = (h / 2).max(1);
        w = (w / 2).max(1);
    }
    sides
}

fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Build the reference backbone: blocks of widths `32/64/128/D` and a `C × D` head.
pub fn build_reference_cnn(
    num_classes: usize,
    feature_dim: usize,
    input: ImageShape,
    init_seed: u64,
) -> Result<Classifier<f32>> {
    build_classifier(
        Architecture {
            input,
            widths: vec![32, 64, 128, feature_dim],
            num_classes,
            mean: vec![0.0; input.channels],
            std: vec![1.0; input.channels],
        },
        init_seed,
    )
}

pub fn build_classifier<T: Real>(arch: Architecture, init_seed: u64) -> Result<Classifier<T>> {
    if arch.num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            arch.num_classes
        )));
    }
    if arch.widths.is_empty() {
        return Err(Error::InvalidArgument("no blocks".into()));
    }
    if arch.feature_dim() < 8 {
        return Err(Error::InvalidArgument(format!(
            "feature dimension must be at least 8, got {}",
            arch.feature_dim()
        )));
    }
    if arch.input.height < MIN_SIDE || arch.input.width < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "input {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
            arch.input.height, arch.input.width
        )));
    }
    if arch.input.channels == 0
        || arch.mean.len() != arch.input.channels
        || arch.std.len() != arch.input.channels
    {
        return Err(Error::shape(
            "normalization statistics",
            arch.input.channels,
            format!("mean {} / std {}", arch.mean.len(), arch.std.len()),
        ));
    }
    if arch.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("normalization std must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = Vec::new();
    let mut cin = arch.input.channels;
    for (b, &cout) in arch.widths.iter().enumerate() {
        let fan_in = 9 * cin;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let mut w = Param::zeros(format!("block{b}.conv.weight"), vec![9, cin, cout]);
        for v in &mut w.data {
            *v = T::from_f64(normal.sample(&mut rng));
        }
        params.push(w);
        let mut gamma = Param::zeros(format!("block{b}.norm.gamma"), vec![cout]);
        gamma.data.iter_mut().for_each(|v| *v = T::ONE);
        params.push(gamma);
        params.push(Param::zeros(format!("block{b}.norm.beta"), vec![cout]));
        cin = cout;
    }
    let d = arch.feature_dim();
    let bound = 1.0 / (d as f64).sqrt();
    let uniform = Uniform::new(-bound, bound).expect("valid range");
    let mut head = Param::zeros("head.weight".to_string(), vec![arch.num_classes, d]);
    for v in &mut head.data {
        *v = T::from_f64(uniform.sample(&mut rng));
    }
    params.push(head);
    Ok(Classifier {
        arch: Arc::new(arch),
        params,
    })
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
}

struct BlockCache<T> {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    col: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    relu_mask: Vec<bool>,
    pool_idx: Vec<u32>,
    out_h: usize,
    out_w: usize,
}

impl<T: Real> Classifier<T> {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn head(&self) -> &[T] {
        &self.params.last().expect("head").data
    }

    pub fn head_mut(&mut self) -> &mut [T] {
        &mut self.params.last_mut().expect("head").data
    }

    /// Set the per-channel input normalization applied inside `forward`.
    pub fn set_normalization(&mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<()> {
        let c = self.arch.input.channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::shape("normalization channels", c, mean.len().max(std.len())));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        let mut arch = (*self.arch).clone();
        arch.mean = mean;
        arch.std = std;
        self.arch = Arc::new(arch);
        Ok(())
    }

    /// Replace the parameter list, e.g. when restoring a checkpoint.
    pub fn from_parts(arch: Architecture, params: Vec<Param<T>>) -> Result<Self> {
        let reference: Classifier<T> = build_classifier(arch.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::shape(
                "parameter list",
                reference.params.len(),
                params.len(),
            ));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.shape != p.shape || p.data.len() != r.data.len() {
                return Err(Error::shape(
                    "parameter",
                    format!("{} {:?}", r.name, r.shape),
                    format!("{} {:?}", p.name, p.shape),
                ));
            }
        }
        Ok(Self {
            arch: Arc::new(arch),
            params,
        })
    }

    /// Convert to another working precision.
    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect()
    }

    /// Logits for externally supplied features: `features · Wᵀ`.
    pub fn head_logits(&self, features: &Mat) -> Result<Mat> {
        let d = self.feature_dim();
        if features.cols != d {
            return Err(Error::shape("head input", d, features.cols));
        }
        let c = self.num_classes();
        let w: Vec<f64> = self.head().iter().map(|v| v.to_f64()).collect();
        let mut out = vec![0.0; features.rows * c];
        gemm(features.rows, d, c, &features.data, Trans::No, &w, Trans::Yes, 0.0, &mut out);
        Mat::from_vec(features.rows, c, out)
    }

    fn check_input(&self, images: &Images) -> Result<()> {
        if images.shape != self.arch.input {
            return Err(Error::shape("model input", self.arch.input, images.shape));
        }
        if images.batch() == 0 {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        Ok(())
    }

    /// Forward pass keeping everything needed by [`Classifier::backward`].
    pub fn forward_train(&self, images: &Images) -> Result<(ModelOutput, ForwardCache<T>)> {
        self.check_input(images)?;
        let batch = images.batch();
        let arch = &*self.arch;
        let ch = arch.input.channels;
        let mut x: Vec<T> = images
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % ch;
                T::from_f64(((v - arch.mean[c]) / arch.std[c]) as f64)
            })
            .collect();

        let sides = block_sides(arch.input, arch.widths.len());
        let mut blocks = Vec::with_capacity(arch.widths.len());
        let mut cin = ch;
        for (b, &cout) in arch.widths.iter().enumerate() {
            let (h, w) = sides[b];
            let weight = &self.params[3 * b].data;
            let gamma = &self.params[3 * b + 1].data;
            let beta = &self.params[3 * b + 2].data;

            let col = im2col(&x, batch, h, w, cin);
            let rows = batch * h * w;
            let mut y = vec![T::ZERO; rows * cout];
            gemm(rows, 9 * cin, cout, &col, Trans::No, weight, Trans::No, T::ZERO, &mut y);

            let (xhat, inv_std) = group_norm_forward(&mut y, batch, h * w, cout, gamma, beta);

            let relu_mask: Vec<bool> = y
                .iter_mut()
                .map(|v| {
                    if *v > T::ZERO {
                        true
                    } else {
                        *v = T::ZERO;
                        false
                    }
                })
                .collect();

            let (pooled, pool_idx, out_h, out_w) = max_pool(&y, batch, h, w, cout);
            blocks.push(BlockCache {
                h,
                w,
                cin,
                cout,
                col,
                xhat,
                inv_std,
                relu_mask,
                pool_idx,
                out_h,
                out_w,
            });
            x = pooled;
            cin = cout;
        }

        // global average pool
        let last = blocks.last().expect("at least one block");
        let spatial = last.out_h * last.out_w;
        let d = cin;
        let mut features = vec![T::ZERO; batch * d];
        let inv = T::from_f64(1.0 / spatial as f64);
        for n in 0..batch {
            for s in 0..spatial {
                let src = &x[(n * spatial + s) * d..(n * spatial + s + 1) * d];
                for (f, &v) in features[n * d..(n + 1) * d].iter_mut().zip(src) {
                    *f += v;
                }
            }
            for f in &mut features[n * d..(n + 1) * d] {
                *f *= inv;
            }
        }

        let c = arch.num_classes;
        let mut logits = vec![T::ZERO; batch * c];
        gemm(batch, d, c, &features, Trans::No, self.head(), Trans::Yes, T::ZERO, &mut logits);

        let output = ModelOutput::from_parts(
            Mat::from_real(batch, d, &features),
            Mat::from_real(batch, c, &logits),
        );
        Ok((
            output,
            ForwardCache {
                batch,
                blocks,
                features,
            },
        ))
    }

    /// Backpropagate loss gradients w.r.t. logits and (optionally) features.
    ///
    /// Returns gradients for every parameter, aligned with [`Classifier::params`].
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &Mat,
        d_features: Option<&Mat>,
    ) -> Result<Grads<T>> {
        let batch = cache.batch;
        let c = self.num_classes();
        let d = self.feature_dim();
        if d_logits.rows != batch || d_logits.cols != c {
            return Err(Error::shape(
                "logit gradient",
                format!("{batch}x{c}"),
                format!("{}x{}", d_logits.rows, d_logits.cols),
            ));
        }
        if let Some(df) = d_features {
            if df.rows != batch || df.cols != d {
                return Err(Error::shape(
                    "feature gradient",
                    format!("{batch}x{d}"),
                    format!("{}x{}", df.rows, df.cols),
                ));
            }
        }
        let mut grads = self.zero_grads();
        let nb = self.arch.widths.len();

        let dl: Vec<T> = d_logits.to_real();
        // head: dW = dlᵀ · features
        gemm(c, batch, d, &dl, Trans::Yes, &cache.features, Trans::No, T::ZERO, &mut grads[3 * nb]);
        let mut dfeat: Vec<T> = match d_features {
            Some(df) => df.to_real(),
            None => vec![T::ZERO; batch * d],
        };
        gemm(batch, c, d, &dl, Trans::No, self.head(), Trans::No, T::ONE, &mut dfeat);

        // global average pool
        let last = cache.blocks.last().expect("block");
        let spatial = last.out_h * last.out_w;
        let inv = T::from_f64(1.0 / spatial as f64);
        let mut dx = vec![T::ZERO; batch * spatial * d];
        for n in 0..batch {
            for s in 0..spatial {
                for k in 0..d {
                    dx[(n * spatial + s) * d + k] = dfeat[n * d + k] * inv;
                }
            }
        }

        for b in (0..nb).rev() {
            let bc = &cache.blocks[b];
            let (h, w, cin, cout) = (bc.h, bc.w, bc.cin, bc.cout);
            // max pool
            let mut dy = vec![T::ZERO; batch * h * w * cout];
            for (o, &src) in bc.pool_idx.iter().enumerate() {
                dy[src as usize] += dx[o];
            }
            // relu
            for (g, &m) in dy.iter_mut().zip(&bc.relu_mask) {
                if !m {
                    *g = T::ZERO;
                }
            }
            // group norm
            let gamma = &self.params[3 * b + 1].data;
            let (gw, rest) = grads[3 * b..3 * b + 3].split_at_mut(1);
            let (ggamma, gbeta) = rest.split_at_mut(1);
            group_norm_backward(
                &mut dy,
                &bc.xhat,
                &bc.inv_std,
                batch,
                h * w,
                cout,
                gamma,
                &mut ggamma[0],
                &mut gbeta[0],
            );
            // conv
            let rows = batch * h * w;
            gemm(9 * cin, rows, cout, &bc.col, Trans::Yes, &dy, Trans::No, T::ZERO, &mut gw[0]);
            if b > 0 {
                let weight = &self.params[3 * b].data;
                let mut dcol = vec![T::ZERO; rows * 9 * cin];
                gemm(rows, cout, 9 * cin, &dy, Trans::No, weight, Trans::Yes, T::ZERO, &mut dcol);
                dx = col2im(&dcol, batch, h, w, cin);
            }
        }
        Ok(grads)
    }
}

impl<T: Real> Forward for Classifier<T> {
    fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn forward(&self, images: &Images) -> Result<ModelOutput> {
        self.forward_train(images).map(|(out, _)| out)
    }
}

/// A classifier that can only be evaluated. Used for the teacher.
#[derive(Debug, Clone)]
pub struct FrozenClassifier<T: Real = f32> {
    inner: Arc<Classifier<T>>,
}

impl<T: Real> FrozenClassifier<T> {
    pub fn inner(&self) -> &Classifier<T> {
        &self.inner
    }
}

impl<T: Real> Forward for FrozenClassifier<T> {
    fn architecture(&self) -> &Architecture {
        self.inner.arch()
    }

    fn forward(&self, images: &Images) -> Result<ModelOutput> {
        self.inner.forward(images)
    }
}

pub trait Freeze<T: Real> {
    fn freeze(self) -> FrozenClassifier<T>;
}

impl<T: Real> Freeze<T> for Classifier<T> {
    fn freeze(self) -> FrozenClassifier<T> {
        FrozenClassifier {
            inner: Arc::new(self),
        }
    }
}

impl<T: Real> Freeze<T> for FrozenClassifier<T> {
    fn freeze(self) -> FrozenClassifier<T> {
        self
    }
}

pub fn freeze<T: Real, M: Freeze<T>>(model: M) -> FrozenClassifier<T> {
    model.freeze()
}

/// 3×3, stride 1, zero padding 1. Rows are output pixels, columns `(ky, kx, ci)`.
fn im2col<T: Real>(x: &[T], batch: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let k = 9 * cin;
    let mut col = vec![T::ZERO; batch * h * w * k];
    for n in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((n * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (ky * 3 + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], batch: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let k = 9 * cin;
    let mut x = vec![T::ZERO; batch * h * w * cin];
    for n in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (ky * 3 + kx) * cin;
                        for c in 0..cin {
                            x[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Normalizes `y` in place and applies the affine transform.
/// Returns the normalized activations and per-(sample, group) inverse std.
fn group_norm_forward<T: Real>(
    y: &mut [T],
    batch: usize,
    spatial: usize,
    channels: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let groups = group_count(channels);
    let cpg = channels / groups;
    let count = (spatial * cpg) as f64;
    let mut xhat = vec![T::ZERO; y.len()];
    let mut inv_stds = vec![T::ZERO; batch * groups];
    for n in 0..batch {
        let base = n * spatial * channels;
        for g in 0..groups {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for s in 0..spatial {
                for c in g * cpg..(g + 1) * cpg {
                    let v = y[base + s * channels + c].to_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + GN_EPS).sqrt();
            inv_stds[n * groups + g] = T::from_f64(inv_std);
            let mean_t = T::from_f64(mean);
            let inv_t = T::from_f64(inv_std);
            for s in 0..spatial {
                for c in g * cpg..(g + 1) * cpg {
                    let i = base + s * channels + c;
                    let xh = (y[i] - mean_t) * inv_t;
                    xhat[i] = xh;
                    y[i] = gamma[c] * xh + beta[c];
                }
            }
        }
    }
    (xhat, inv_stds)
}

#[allow(clippy::too_many_arguments)]
fn group_norm_backward<T: Real>(
    dy: &mut [T],
    xhat: &[T],
    inv_std: &[T],
    batch: usize,
    spatial: usize,
    channels: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let groups = group_count(channels);
    let cpg = channels / groups;
    let count = T::from_f64((spatial * cpg) as f64);
    for n in 0..batch {
        let base = n * spatial * channels;
        for g in 0..groups {
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xhat = T::ZERO;
            for s in 0..spatial {
                for c in g * cpg..(g + 1) * cpg {
                    let i = base + s * channels + c;
                    dgamma[c] += dy[i] * xhat[i];
                    dbeta[c] += dy[i];
                    let dxh = dy[i] * gamma[c];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[i];
                }
            }
            let k = inv_std[n * groups + g] / count;
            for s in 0..spatial {
                for c in g * cpg..(g + 1) * cpg {
                    let i = base + s * channels + c;
                    let dxh = dy[i] * gamma[c];
                    dy[i] = k * (count * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                }
            }
        }
    }
}

/// 2×2 max pool with stride 2 (floor). Sides of 1 pass through unchanged.
fn max_pool<T: Real>(
    y: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let (kh, kw) = (if h >= 2 { 2 } else { 1 }, if w >= 2 { 2 } else { 1 });
    let (oh, ow) = (h / kh, w / kw);
    let mut out = vec![T::ZERO; batch * oh * ow * c];
    let mut idx = vec![0u32; out.len()];
    for n in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let i = ((n * h + oy * kh + dy) * w + ox * kw + dx) * c + ch;
                            if best == usize::MAX || y[i] > y[best] {
                                best = i;
                            }
                        }
                    }
                    let o = ((n * oh + oy) * ow + ox) * c + ch;
                    out[o] = y[best];
                    idx[o] = best as u32;
                }
            }
        }
    }
    (out, idx, oh, ow)
}
