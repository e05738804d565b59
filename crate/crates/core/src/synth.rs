//! Procedural handwritten-digit fixture.
//!
//! Each digit class is a fixed stroke skeleton in the unit square. Samples are
//! drawn by jittering the control points, applying a random affine map and
//! rendering anti-aliased strokes of random width, then adding pixel noise.
//! Generation is a pure function of the config seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, ArrayData};
use crate::error::{Error, Result};
use crate::tensor::{ImageShape, Images};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Std of per-control-point displacement, in units of the glyph box.
    pub jitter: f64,
    /// Std of additive pixel noise.
    pub noise: f64,
    pub stroke_min: f64,
    pub stroke_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_per_class: 200,
            test_per_class: 200,
            rotation_deg: 20.0,
            jitter: 0.045,
            noise: 0.08,
            stroke_min: 0.08,
            stroke_max: 0.16,
        }
    }
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = 14;
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons for digits 0–9 (x right, y down).
fn skeleton(digit: u32) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.26, 0.37, 0.0, 360.0)],
        1 => vec![vec![(0.36, 0.27), (0.52, 0.12), (0.52, 0.88)]],
        2 => {
            let mut top = arc(0.5, 0.33, 0.21, 0.2, 190.0, 380.0);
            top.extend([(0.27, 0.87), (0.76, 0.87)]);
            vec![top]
        }
        3 => vec![
            arc(0.47, 0.31, 0.2, 0.18, -160.0, 90.0),
            arc(0.47, 0.68, 0.22, 0.2, -90.0, 160.0),
        ],
        4 => vec![
            vec![(0.6, 0.12), (0.24, 0.62), (0.8, 0.62)],
            vec![(0.62, 0.35), (0.62, 0.9)],
        ],
        5 => {
            let mut s = vec![(0.73, 0.13), (0.33, 0.13), (0.3, 0.46)];
            s.extend(arc(0.49, 0.64, 0.23, 0.22, -130.0, 150.0));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.68, 0.13), (0.45, 0.27), (0.31, 0.52)];
            s.extend(arc(0.5, 0.67, 0.2, 0.2, 190.0, 550.0));
            vec![s]
        }
        7 => vec![vec![(0.25, 0.13), (0.76, 0.13), (0.42, 0.9)]],
        8 => vec![
            arc(0.5, 0.3, 0.18, 0.17, 0.0, 360.0),
            arc(0.5, 0.69, 0.22, 0.2, 0.0, 360.0),
        ],
        9 => {
            let mut s = arc(0.5, 0.33, 0.2, 0.2, 10.0, 370.0);
            s.extend([(0.68, 0.55), (0.6, 0.9)]);
            vec![s]
        }
        _ => unreachable!("digit out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render one randomly deformed digit into an `H × W` intensity map.
fn render_digit<R: Rng>(digit: u32, cfg: &SynthConfig, h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("valid std");
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    let scale = rng.random_range(0.78..1.02);
    let aspect = rng.random_range(0.85..1.15);
    let shear = rng.random_range(-0.25..0.25);
    let (tx, ty) = (rng.random_range(-0.07..0.07), rng.random_range(-0.07..0.07));
    let width = rng.random_range(cfg.stroke_min..cfg.stroke_max);
    let (s, c) = angle.sin_cos();

    let strokes: Vec<Stroke> = skeleton(digit)
        .into_iter()
        .map(|stroke| {
            // Smooth jitter: one offset per stroke plus a small per-point term.
            let (ox, oy) = (jitter.sample(rng), jitter.sample(rng));
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = x - 0.5 + ox + 0.5 * jitter.sample(rng);
                    let y = y - 0.5 + oy + 0.5 * jitter.sample(rng);
                    let x = (x + shear * y) * scale * aspect;
                    let y = y * scale;
                    (c * x - s * y + 0.5 + tx, s * x + c * y + 0.5 + ty)
                })
                .collect()
        })
        .collect();

    let aa = 1.0 / h.min(w) as f64;
    let mut img = vec![0.0f32; h * w];
    for py in 0..h {
        for px in 0..w {
            let p = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
            let mut d = f64::INFINITY;
            for stroke in &strokes {
                for seg in stroke.windows(2) {
                    d = d.min(segment_distance(p, seg[0], seg[1]));
                }
            }
            let ink = (1.0 - (d - width / 2.0) / aa).clamp(0.0, 1.0);
            img[py * w + px] = (ink + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

fn generate_split(cfg: &SynthConfig, shape: ImageShape, per_class: usize, stream: u64) -> ArrayData {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut images = Images::zeros(10 * per_class, shape);
    let mut labels = Vec::with_capacity(10 * per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, stream));
    let mut n = 0;
    for k in 0..per_class {
        for digit in 0..10u32 {
            let gray = render_digit(digit, cfg, h, w, &mut rng);
            let out = images.image_mut(n);
            for (i, &v) in gray.iter().enumerate() {
                out[i * ch..(i + 1) * ch].iter_mut().for_each(|o| *o = v);
            }
            labels.push(digit);
            n += 1;
        }
        let _ = k;
    }
    ArrayData { images, labels }
}

/// Generate `(train, test)` arrays covering digits 0–9.
pub fn generate(cfg: &SynthConfig, shape: ImageShape) -> Result<(ArrayData, ArrayData)> {
    if shape.is_empty() {
        return Err(Error::config("dataset.image_shape", "dimensions must be positive"));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::config("dataset.synthesize", "per-class counts must be positive"));
    }
    if !(cfg.stroke_min > 0.0 && cfg.stroke_max > cfg.stroke_min) {
        return Err(Error::config("dataset.synthesize", "need 0 < stroke_min < stroke_max"));
    }
    Ok((
        generate_split(cfg, shape, cfg.train_per_class, 1),
        generate_split(cfg, shape, cfg.test_per_class, 2),
    ))
}
