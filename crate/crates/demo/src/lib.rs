//! Browser bindings for three small interactive views:
//! a CutMix preview on synthetic digits, the two-hot smoothed target, and an
//! AUROC/OSCR explorer over simulated scores.
//!
//! Each exported function returns JSON so the page needs no glue beyond the
//! generated bindings. The plain Rust functions underneath are what the
//! tests exercise.

use osrmix::augment::{apply_cutmix, CutBox};
use osrmix::data::LabeledBatch;
use osrmix::losses::two_hot_smooth;
use osrmix::metrics::{auroc, closed_set_accuracy, oscr, oscr_curve, ScoredSample};
use osrmix::synth::{generate, SynthConfig};
use osrmix::tensor::ImageShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SIDE: usize = 28;
const CLASSES: usize = 10;

#[derive(Debug, Serialize)]
pub struct CutmixPreview {
    pub side: usize,
    /// Grayscale pixels of the two sources and the mix, each `side²` bytes.
    pub source_a: Vec<u8>,
    pub source_b: Vec<u8>,
    pub mixed: Vec<u8>,
    /// Area fraction actually kept from `a` after clipping the box.
    pub lam: f64,
    pub y_m: Vec<f64>,
    pub y_u: Vec<f64>,
}

fn to_bytes(px: &[f32]) -> Vec<u8> {
    px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn cutmix_preview(digit_a: u32, digit_b: u32, lam: f64, seed: u64) -> Result<CutmixPreview, String> {
    if digit_a as usize >= CLASSES || digit_b as usize >= CLASSES {
        return Err("digits must be 0-9".into());
    }
    let synth = SynthConfig {
        seed,
        train_per_class: 1,
        test_per_class: 1,
        ..SynthConfig::default()
    };
    let shape = ImageShape::new(SIDE, SIDE, 1);
    let (train, _) = generate(&synth, shape).map_err(|e| e.to_string())?;
    let batch = LabeledBatch {
        is_known: vec![true; train.labels.len()],
        labels: train.labels.iter().map(|&l| l as i32).collect(),
        images: train.images,
    };
    let find = |d: u32| batch.labels.iter().position(|&l| l == d as i32).ok_or("digit missing");
    let (i, j) = (find(digit_a)?, find(digit_b)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bx = CutBox::sample(lam.clamp(0.0, 1.0), SIDE, SIDE, &mut rng);
    let m = apply_cutmix(&batch, &[i], &[j], &[bx], CLASSES).map_err(|e| e.to_string())?;
    let y_m = m.y_m.row(0).to_vec();
    Ok(CutmixPreview {
        side: SIDE,
        source_a: to_bytes(batch.images.image(i)),
        source_b: to_bytes(batch.images.image(j)),
        mixed: to_bytes(m.images.image(0)),
        lam: m.lam[0],
        y_u: two_hot_smooth(&y_m, CLASSES).y_u,
        y_m,
    })
}

/// Smoothed target for a pair of classes mixed at `lam`.
pub fn two_hot(c1: usize, c2: usize, lam: f64, classes: usize) -> Result<Vec<f64>, String> {
    if classes < 2 || c1 >= classes || c2 >= classes {
        return Err(format!("classes must lie in 0..{classes}"));
    }
    let lam = lam.clamp(0.0, 1.0);
    let mut y_m = vec![0.0; classes];
    y_m[c1] += lam;
    y_m[c2] += 1.0 - lam;
    Ok(two_hot_smooth(&y_m, classes).y_u)
}

#[derive(Debug, Clone, Copy, serde::Deserialize)]
pub struct ScoreSim {
    pub n_known: usize,
    pub n_unknown: usize,
    /// Distance between the known and unknown score means, in std units.
    pub separation: f64,
    /// Closed-set accuracy of the simulated classifier.
    pub accuracy: f64,
    /// How much lower misclassified knowns score than correct ones.
    pub error_penalty: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Curves {
    pub auroc: f64,
    pub oscr: f64,
    pub accuracy: f64,
    /// (FPR, TPR) pairs.
    pub roc: Vec<(f64, f64)>,
    /// (FPR, CCR) pairs.
    pub oscr_curve: Vec<(f64, f64)>,
}

pub fn simulate_curves(sim: &ScoreSim) -> Result<Curves, String> {
    if sim.n_known == 0 || sim.n_unknown == 0 {
        return Err("both splits need at least one sample".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let noise = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let mut samples = Vec::with_capacity(sim.n_known + sim.n_unknown);
    for _ in 0..sim.n_known {
        let correct = rng.random::<f64>() < sim.accuracy;
        let shift = if correct { 0.0 } else { sim.error_penalty };
        samples.push(ScoredSample {
            score: sim.separation - shift + noise.sample(&mut rng),
            predicted_class: 0,
            true_class: if correct { 0 } else { 1 },
            is_known: true,
        });
    }
    for _ in 0..sim.n_unknown {
        samples.push(ScoredSample {
            score: noise.sample(&mut rng),
            predicted_class: 0,
            true_class: -1,
            is_known: false,
        });
    }
    let known: Vec<f64> = samples.iter().filter(|s| s.is_known).map(|s| s.score).collect();
    let unknown: Vec<f64> = samples.iter().filter(|s| !s.is_known).map(|s| s.score).collect();
    Ok(Curves {
        auroc: auroc(&known, &unknown).map_err(|e| e.to_string())?,
        oscr: oscr(&samples).map_err(|e| e.to_string())?,
        accuracy: closed_set_accuracy(&samples),
        roc: roc_curve(&known, &unknown),
        oscr_curve: oscr_curve(&samples).map_err(|e| e.to_string())?,
    })
}

/// Threshold sweep from high to low; tied scores move together.
fn roc_curve(known: &[f64], unknown: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut pts = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / nu, tp / nk));
    }
    pts
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = cutmixPreview)]
pub fn cutmix_preview_js(digit_a: u32, digit_b: u32, lam: f64, seed: u32) -> Result<String, JsError> {
    json(cutmix_preview(digit_a, digit_b, lam, seed as u64))
}

#[wasm_bindgen(js_name = twoHot)]
pub fn two_hot_js(c1: u32, c2: u32, lam: f64, classes: u32) -> Result<String, JsError> {
    json(two_hot(c1 as usize, c2 as usize, lam, classes as usize))
}

/// `params` is a JSON `ScoreSim`.
#[wasm_bindgen(js_name = simulateCurves)]
pub fn simulate_curves_js(params: &str) -> Result<String, JsError> {
    let sim: ScoreSim = serde_json::from_str(params).map_err(|e| JsError::new(&e.to_string()))?;
    json(simulate_curves(&sim))
}
