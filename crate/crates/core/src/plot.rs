//! Minimal static PNG renderings of diagnostic outputs. No axes or text;
//! the JSON next to each image carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::diagnostics::DiscrepancyMatrix;
use crate::error::{Error, Result};
use crate::metrics::ScoreHistograms;

/// Side length of one heatmap cell in pixels.
pub const CELL_PX: u32 = 16;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([160, 160, 160]);
const BLUE: Rgb<u8> = Rgb([49, 99, 196]);
const ORANGE: Rgb<u8> = Rgb([230, 126, 34]);

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: format!("png encode: {e}"),
    })
}

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// Diverging blue-white-red map for `t` in `[-1, 1]`.
fn diverging(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let (end, s) = if t >= 0.0 { ([178, 24, 43], t) } else { ([33, 102, 172], -t) };
    Rgb([lerp(255, end[0], s), lerp(255, end[1], s), lerp(255, end[2], s)])
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// One `cell × cell` square per matrix entry; absent entries are gray.
pub fn heatmap(m: &DiscrepancyMatrix, cell: u32) -> RgbImage {
    let n = m.size() as u32;
    let scale = m
        .entries
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let mut img = RgbImage::from_pixel(n * cell, n * cell, WHITE);
    for (r, row) in m.entries.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let color = match v {
                Some(v) if scale > 0.0 => diverging(v / scale),
                Some(_) => WHITE,
                None => GRAY,
            };
            fill(&mut img, c as u32 * cell, r as u32 * cell, cell, cell, color);
        }
    }
    img
}

/// Known (blue) and unknown (orange) bars side by side per bin, each split
/// normalized to its own total.
pub fn histogram_pair(h: &ScoreHistograms) -> RgbImage {
    let bins = h.known.len().max(h.unknown.len()).max(1) as u32;
    let (bar, gap, height) = (8u32, 4u32, 160u32);
    let width = bins * (2 * bar + gap) + gap;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let frac = |counts: &[usize]| -> Vec<f64> {
        let total = counts.iter().sum::<usize>().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    };
    let (k, u) = (frac(&h.known), frac(&h.unknown));
    let top = k.iter().chain(&u).fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    for b in 0..bins as usize {
        let x = gap + b as u32 * (2 * bar + gap);
        for (offset, vals, color) in [(0, &k, BLUE), (bar, &u, ORANGE)] {
            let v = vals.get(b).copied().unwrap_or(0.0);
            let hpx = ((v / top) * (height - 4) as f64).round() as u32;
            fill(&mut img, x + offset, height - hpx, bar, hpx, color);
        }
    }
    img
}

/// One bar per value, scaled to the largest.
pub fn bars(values: &[f64]) -> RgbImage {
    let n = values.len().max(1) as u32;
    let (bar, gap, height) = (24u32, 8u32, 160u32);
    let mut img = RgbImage::from_pixel(n * (bar + gap) + gap, height, WHITE);
    let top = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    for (i, v) in values.iter().enumerate() {
        let hpx = ((v.abs() / top) * (height - 4) as f64).round() as u32;
        let color = if i % 2 == 0 { BLUE } else { ORANGE };
        fill(&mut img, gap + i as u32 * (bar + gap), height - hpx, bar, hpx, color);
    }
    img
}
