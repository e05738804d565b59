//! Dataset ingestion, known/unknown splits and deterministic batching.
//!
//! Two on-disk layouts are supported under `root_path`:
//!
//! - `array_file`: `train.omdx` and `test.omdx`, each
//!   `b"OMDX0001" | dims: 4 × u32 (N, H, W, Ch) | N·H·W·Ch × f32 | N × u32 labels`,
//!   all little-endian, pixels in `[0, 1]`;
//! - `directory_per_class`: `train/<class id>/*.png` and `test/<class id>/*.png`.
//!
//! Training data keeps only known classes. Test data is split into known and
//! unknown streams; unknown samples carry the label `-1`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::tensor::{ImageShape, Images};

pub const ARRAY_MAGIC: &[u8; 8] = b"OMDX0001";
pub const UNKNOWN_LABEL: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    DirectoryPerClass,
    ArrayFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub layout: Layout,
    pub known_classes: Vec<u32>,
    #[serde(default)]
    pub unknown_classes: Vec<u32>,
    pub image_shape: ImageShape,
    pub normalization: Normalization,
    /// Keep at most this many training images per known class (file order).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_per_class: Option<usize>,
    /// When set and the array files are missing, they are generated first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesize: Option<SynthConfig>,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.known_classes.len()
    }

    /// Checks that need no file I/O.
    pub fn validate(&self) -> Result<()> {
        if self.known_classes.len() < 2 {
            return Err(Error::config(
                "dataset.known_classes",
                format!("need at least 2 known classes, got {}", self.known_classes.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in self.known_classes.iter().chain(&self.unknown_classes) {
            if !seen.insert(c) {
                let field = if self.known_classes.contains(&c) && self.unknown_classes.contains(&c) {
                    "dataset.unknown_classes"
                } else {
                    "dataset.known_classes"
                };
                return Err(Error::config(
                    field,
                    format!("class {c} listed twice (known and unknown sets must be disjoint)"),
                ));
            }
        }
        let ch = self.image_shape.channels;
        if self.image_shape.is_empty() {
            return Err(Error::config("dataset.image_shape", "dimensions must be positive"));
        }
        if self.normalization.mean.len() != ch || self.normalization.std.len() != ch {
            return Err(Error::config(
                "dataset.normalization",
                format!("expected {ch} per-channel values"),
            ));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("dataset.normalization.std", "must be positive"));
        }
        Ok(())
    }

    /// Map from dataset class id to contiguous training index.
    pub fn class_index(&self) -> HashMap<u32, usize> {
        self.known_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }
}

/// A batch of images with labels in `[0, C)` for knowns and `-1` for unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Images,
    pub labels: Vec<i32>,
    pub is_known: Vec<bool>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            is_known: indices.iter().map(|&i| self.is_known[i]).collect(),
        }
    }

    /// Labels as class indices; fails on unknown samples.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                usize::try_from(l)
                    .map_err(|_| Error::InvalidArgument("unknown-class sample in a training batch".into()))
            })
            .collect()
    }
}

/// Known/unknown split ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledBatch,
    pub eval_known: LabeledBatch,
    pub eval_unknown: LabeledBatch,
    /// Dataset class id of every unknown evaluation sample.
    pub unknown_class_ids: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn has_unknowns(&self) -> bool {
        !self.eval_unknown.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSeed {
    pub rng_seed: u64,
    pub split_seed: u64,
}

impl SplitSeed {
    pub fn new(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            split_seed: seed,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw contents of one array file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    pub images: Images,
    pub labels: Vec<u32>,
}

pub fn write_array_file(path: &Path, data: &ArrayData) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let s = data.images.shape;
    let n = data.images.batch();
    if data.labels.len() != n {
        return Err(Error::shape("array file labels", n, data.labels.len()));
    }
    let mut buf = Vec::with_capacity(8 + 16 + 4 * (data.images.data.len() + n));
    buf.extend_from_slice(ARRAY_MAGIC);
    for d in [n, s.height, s.width, s.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &data.images.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in &data.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_array_file(path: &Path) -> Result<ArrayData> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let decode = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 24 || &bytes[..8] != ARRAY_MAGIC {
        return Err(decode("missing OMDX0001 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let pixels = n * h * w * c;
    let expected = 24 + 4 * pixels + 4 * n;
    if bytes.len() != expected {
        return Err(decode(format!(
            "expected {expected} bytes for {n}x{h}x{w}x{c}, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[24..24 + 4 * pixels]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels = bytes[24 + 4 * pixels..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ArrayData {
        images: Images {
            shape: ImageShape::new(h, w, c),
            data,
        },
        labels,
    })
}

fn decode_image(path: &Path, shape: ImageShape) -> Result<Vec<f32>> {
    let err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (shape.height, shape.width) {
        return Err(err(format!(
            "image is {h}x{w}, expected {}x{}",
            shape.height, shape.width
        )));
    }
    let data: Vec<f32> = match shape.channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        c => return Err(err(format!("unsupported channel count {c}"))),
    };
    Ok(data)
}

/// Read `<split dir>/<class>/*` for each class, in sorted file order.
fn read_directory_split(dir: &Path, classes: &[u32], shape: ImageShape) -> Result<ArrayData> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &class in classes {
        let class_dir = dir.join(class.to_string());
        if !class_dir.is_dir() {
            return Err(Error::MissingClass {
                class_id: class,
                path: dir.to_path_buf(),
            });
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            data.extend(decode_image(&f, shape)?);
            labels.push(class);
        }
    }
    Ok(ArrayData {
        images: Images { shape, data },
        labels,
    })
}

fn batch_from(images: &Images, indices: &[usize], labels: Vec<i32>, known: bool) -> LabeledBatch {
    LabeledBatch {
        images: images.select(indices),
        is_known: vec![known; labels.len()],
        labels,
    }
}

/// Partition raw arrays into the training set and the known/unknown test sets.
pub fn split_arrays(spec: &DatasetSpec, train: &ArrayData, test: &ArrayData) -> Result<Dataset> {
    spec.validate()?;
    for (name, arr) in [("train", train), ("test", test)] {
        if arr.images.shape != spec.image_shape {
            return Err(Error::shape(
                if name == "train" { "train images" } else { "test images" },
                spec.image_shape,
                arr.images.shape,
            ));
        }
    }
    let index = spec.class_index();
    let cap = spec.max_train_per_class.unwrap_or(usize::MAX);
    let mut taken = vec![0usize; index.len()];
    let (tr_idx, tr_labels): (Vec<usize>, Vec<i32>) = train
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, c)| index.get(c).map(|&k| (i, k)))
        .filter(|&(_, k)| {
            taken[k] += 1;
            taken[k] <= cap
        })
        .map(|(i, k)| (i, k as i32))
        .unzip();
    let (k_idx, k_labels): (Vec<usize>, Vec<i32>) = test
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, c)| index.get(c).map(|&k| (i, k as i32)))
        .unzip();
    let u_idx: Vec<usize> = test
        .labels
        .iter()
        .enumerate()
        .filter(|(_, c)| spec.unknown_classes.contains(c))
        .map(|(i, _)| i)
        .collect();
    Ok(Dataset {
        train: batch_from(&train.images, &tr_idx, tr_labels, true),
        eval_known: batch_from(&test.images, &k_idx, k_labels, true),
        eval_unknown: batch_from(&test.images, &u_idx, vec![UNKNOWN_LABEL; u_idx.len()], false),
        unknown_class_ids: u_idx.iter().map(|&i| test.labels[i]).collect(),
        num_classes: spec.num_classes(),
    })
}

/// Generate the synthetic array files if the spec asks for it and they are absent.
pub fn materialize(spec: &DatasetSpec) -> Result<()> {
    let Some(synth) = &spec.synthesize else {
        return Ok(());
    };
    let train = spec.root_path.join("train.omdx");
    let test = spec.root_path.join("test.omdx");
    if train.exists() && test.exists() {
        return Ok(());
    }
    let (tr, te) = crate::synth::generate(synth, spec.image_shape)?;
    // Write-then-rename so concurrent runs never observe a partial file.
    for (path, data) in [(&train, &tr), (&test, &te)] {
        let tag = format!("{:?}", std::thread::current().id()).replace(|c: char| !c.is_ascii_digit(), "");
        let tmp = path.with_extension(format!("tmp-{}-{tag}", std::process::id()));
        write_array_file(&tmp, data)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Load and split the dataset described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    materialize(spec)?;
    let root = &spec.root_path;
    if !root.is_dir() {
        return Err(Error::config(
            "dataset.root_path",
            format!("{} is not a directory", root.display()),
        ));
    }
    let all: Vec<u32> = spec
        .known_classes
        .iter()
        .chain(&spec.unknown_classes)
        .copied()
        .collect();
    let (train, test) = match spec.layout {
        Layout::ArrayFile => (
            read_array_file(&root.join("train.omdx"))?,
            read_array_file(&root.join("test.omdx"))?,
        ),
        Layout::DirectoryPerClass => (
            read_directory_split(&root.join("train"), &spec.known_classes, spec.image_shape)?,
            read_directory_split(&root.join("test"), &all, spec.image_shape)?,
        ),
    };
    split_arrays(spec, &train, &test)
}

/// Split a set into batches for one epoch. The order is a pure function of
/// `(seed.split_seed, epoch)`.
pub fn make_batches(
    data: &LabeledBatch,
    batch_size: usize,
    seed: SplitSeed,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<LabeledBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty stream".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed.split_seed, epoch));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(|idx| data.select(idx)).collect())
}
