//! Minimal PNG figures: overlaid histograms and heat-map overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{invalid, Error, Result};

pub const HISTOGRAM_BINS: usize = 40;
pub const GENERATED_COLOR: [u8; 3] = [220, 60, 50];
pub const IN_IMAGE_COLOR: [u8; 3] = [50, 110, 220];

const WIDTH: u32 = 400;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 20;

/// Bin counts of `values` over `[lo, hi]` (the upper edge is inclusive).
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// Overlaid normalized histograms of cosine similarities on `[-1, 1]`,
/// one color per series, blended where they overlap.
pub fn write_histogram_png(path: &Path, series: &[(&[f64], [u8; 3])], bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(invalid!("histogram needs at least one bin"));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let densities: Vec<Vec<f64>> = series
        .iter()
        .map(|(v, _)| {
            let c = histogram(v, bins, -1.0, 1.0);
            let total = v.len().max(1) as f64;
            c.into_iter().map(|n| n as f64 / total).collect()
        })
        .collect();
    let peak = densities
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for (d, (_, color)) in densities.iter().zip(series) {
        for (b, &dens) in d.iter().enumerate() {
            let x0 = MARGIN + (b as u32 * plot_w) / bins as u32;
            let x1 = MARGIN + ((b as u32 + 1) * plot_w) / bins as u32;
            let h = ((dens / peak) * plot_h as f64).round() as u32;
            for x in x0..x1 {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    let p = img.get_pixel_mut(x, y);
                    for c in 0..3 {
                        p.0[c] = ((p.0[c] as u16 + color[c] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    // Axis and a tick at zero similarity.
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    for y in HEIGHT - MARGIN..HEIGHT - MARGIN + 5 {
        img.put_pixel(WIDTH / 2, y, Rgb([0, 0, 0]));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Blue-to-red color ramp for `t` in `[0, 1]`.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (255.0 * t).round() as u8,
        (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8,
        (255.0 * (1.0 - t)).round() as u8,
    ]
}

/// Heat map of a row-major `h × w` grid, upscaled to `base`'s size (nearest)
/// and alpha-blended over it; values are normalized by their min and max.
pub fn heatmap_overlay(values: &[f64], h: usize, w: usize, base: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(invalid!("heat map has {} values for {h}x{w}", values.len()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-300);
    let (bw, bh) = base.dimensions();
    Ok(RgbImage::from_fn(bw, bh, |x, y| {
        let gy = (y as usize * h) / bh as usize;
        let gx = (x as usize * w) / bw as usize;
        let c = ramp((values[gy * w + gx] - lo) / span);
        let b = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|k| {
            (alpha * c[k] as f64 + (1.0 - alpha) * b[k] as f64).round() as u8
        }))
    }))
}
