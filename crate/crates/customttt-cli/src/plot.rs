//! Minimal PNG charts drawn straight into pixel buffers: line charts for
//! training curves and bar charts for per-layer scores and metric columns.
//! Numeric labels live in the CSVs next to each chart; the images only show
//! the shape of the data, so no text rendering is needed.

use std::path::Path;

use customttt::{Error, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN_LEFT: u32 = 40;
const MARGIN_RIGHT: u32 = 12;
const MARGIN_TOP: u32 = 12;
const MARGIN_BOTTOM: u32 = 28;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const ZERO_LINE: Rgb<u8> = Rgb([200, 200, 200]);
const BAR: Rgb<u8> = Rgb([70, 130, 180]);

const SERIES_COLORS: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

struct Plane {
    min: f64,
    max: f64,
}

impl Plane {
    fn over(values: impl Iterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() || !max.is_finite() {
            (min, max) = (0.0, 1.0);
        }
        if (max - min).abs() < 1e-12 {
            min -= 1.0;
            max += 1.0;
        }
        // A little headroom so extremes do not sit on the frame.
        let pad = (max - min) * 0.05;
        Self {
            min: min - pad,
            max: max + pad,
        }
    }

    fn y(&self, v: f64) -> f32 {
        let span = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
        let frac = (v - self.min) / (self.max - self.min);
        (MARGIN_TOP as f64 + (1.0 - frac) * span) as f32
    }
}

fn x_at(i: usize, n: usize) -> f32 {
    let span = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let frac = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    (MARGIN_LEFT as f64 + frac * span) as f32
}

fn put(img: &mut RgbImage, x: f32, y: f32, color: Rgb<u8>) {
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize + 1;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        put(img, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, color);
    }
}

fn blank_canvas(plane: &Plane) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    if plane.min < 0.0 && plane.max > 0.0 {
        let y = plane.y(0.0);
        draw_line(
            &mut img,
            (MARGIN_LEFT as f32, y),
            ((WIDTH - MARGIN_RIGHT) as f32, y),
            ZERO_LINE,
        );
    }
    let bottom = (HEIGHT - MARGIN_BOTTOM) as f32;
    draw_line(
        &mut img,
        (MARGIN_LEFT as f32, MARGIN_TOP as f32),
        (MARGIN_LEFT as f32, bottom),
        AXIS,
    );
    draw_line(
        &mut img,
        (MARGIN_LEFT as f32, bottom),
        ((WIDTH - MARGIN_RIGHT) as f32, bottom),
        AXIS,
    );
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("chart write failed: {e}"))))
}

/// One polyline per series over a shared index axis.
pub fn line_chart(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let plane = Plane::over(series.iter().flatten().copied());
    let mut img = blank_canvas(&plane);
    for (si, values) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let n = values.len();
        for i in 1..n {
            if values[i - 1].is_finite() && values[i].is_finite() {
                draw_line(
                    &mut img,
                    (x_at(i - 1, n), plane.y(values[i - 1])),
                    (x_at(i, n), plane.y(values[i])),
                    color,
                );
            }
        }
        if n == 1 && values[0].is_finite() {
            put(&mut img, x_at(0, 1), plane.y(values[0]), color);
        }
    }
    save(&img, path)
}

/// Vertical bars from the zero baseline (or the plot floor when all values
/// share a sign and zero is out of range).
pub fn bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    let plane = Plane::over(values.iter().copied().chain([0.0]));
    let mut img = blank_canvas(&plane);
    let n = values.len().max(1);
    let span = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let slot = span / n as f64;
    let bar_w = (slot * 0.7).max(1.0);
    let base_y = plane.y(0.0);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let x0 = MARGIN_LEFT as f64 + slot * i as f64 + (slot - bar_w) / 2.0;
        let top = plane.y(v);
        let (lo, hi) = if top <= base_y { (top, base_y) } else { (base_y, top) };
        for dx in 0..bar_w as u32 {
            draw_line(
                &mut img,
                (x0 as f32 + dx as f32, lo),
                (x0 as f32 + dx as f32, hi),
                BAR,
            );
        }
    }
    save(&img, path)
}
