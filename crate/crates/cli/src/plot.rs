//! Minimal PNG charts: grouped bars for IoU tables, polylines for loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 270;
const MARGIN: u32 = 20;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn fill(img: &mut RgbImage, x0: u32, x1: u32, y0: u32, y1: u32, color: [u8; 3]) {
    for x in x0..x1.min(WIDTH) {
        for y in y0..y1.min(HEIGHT) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// `groups[g][s]` in `[0, 1]`; one colour per series `s`. Missing values draw nothing.
pub fn grouped_bars(path: &Path, groups: &[Vec<Option<f64>>]) -> image::ImageResult<()> {
    let mut img = canvas();
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let n = groups.len().max(1) as u32;
    let slot = plot_w / n;
    for (g, series) in groups.iter().enumerate() {
        let bar = (slot * 3 / 4) / series.len().max(1) as u32;
        for (s, v) in series.iter().enumerate() {
            let Some(v) = v else { continue };
            let h = (v.clamp(0.0, 1.0) * plot_h).round() as u32;
            let x0 = MARGIN + 1 + g as u32 * slot + slot / 8 + s as u32 * bar;
            fill(&mut img, x0, x0 + bar.max(1), HEIGHT - MARGIN - h, HEIGHT - MARGIN, PALETTE[s % PALETTE.len()]);
        }
    }
    img.save(path)
}

/// Each series scaled to its own min/max.
pub fn lines(path: &Path, series: &[Vec<f64>]) -> image::ImageResult<()> {
    let mut img = canvas();
    let plot_w = (WIDTH - 2 * MARGIN - 1) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    for (s, values) in series.iter().enumerate() {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < 2 {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        for (i, v) in finite.iter().enumerate() {
            let x = MARGIN + 1 + (i as f64 / (finite.len() - 1) as f64 * plot_w) as u32;
            let y = HEIGHT - MARGIN - 1 - ((v - lo) / span * (plot_h - 1.0)) as u32;
            img.put_pixel(x.min(WIDTH - 1), y, color);
        }
    }
    img.save(path)
}
