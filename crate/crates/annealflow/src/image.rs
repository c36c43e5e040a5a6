//! Free-energy heatmaps and line plots as binary PPM (`P6`) images.
//!
//! Color mapping: a free energy `F` is mapped to `t = (F - F_min) / span`,
//! clamped to `[0, 1]`, where `F_min` is the grid minimum. `t` is then
//! interpolated linearly between the stops of [`RAMP`]. Every channel of
//! every stop is at least as large as in the previous one, so each channel
//! is nondecreasing in `F`: low free energy (high density) is dark, high
//! free energy is bright.

use std::path::Path;

use annealflow_core::metrics::Hist2d;

use crate::csv::num;
use crate::RunError;

pub const RAMP: [(f64, [u8; 3]); 4] = [
    (0.0, [10, 10, 60]),
    (1.0 / 3.0, [120, 20, 140]),
    (2.0 / 3.0, [240, 120, 140]),
    (1.0, [255, 250, 220]),
];

pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 1.0 } else { t.clamp(0.0, 1.0) };
    let k = RAMP.windows(2).position(|w| t <= w[1].0).unwrap_or(RAMP.len() - 2);
    let ((t0, c0), (t1, c1)) = (RAMP[k], RAMP[k + 1]);
    let u = (t - t0) / (t1 - t0);
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let v = f64::from(c0[ch]) + u * (f64::from(c1[ch]) - f64::from(c0[ch]));
        out[ch] = v.round() as u8;
    }
    out
}

/// Free energies `-ln p` on an `nx x ny` grid, row-major with the first
/// axis along x.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyGrid {
    pub nx: usize,
    pub ny: usize,
    pub ranges: [(f64, f64); 2],
    pub values: Vec<f64>,
}

impl FreeEnergyGrid {
    /// From probabilities or densities, floored at `floor` before the log.
    /// NaN inputs stay NaN and are rejected when rendering.
    pub fn from_probs(nx: usize, ny: usize, ranges: [(f64, f64); 2], probs: &[f64], floor: f64) -> Self {
        let values = probs.iter().map(|&p| if p.is_nan() { p } else { -p.max(floor).ln() }).collect();
        Self { nx, ny, ranges, values }
    }

    /// From log densities, floored at `ln floor`.
    pub fn from_log_density(nx: usize, ny: usize, ranges: [(f64, f64); 2], logp: &[f64], floor: f64) -> Self {
        let lf = floor.ln();
        let values = logp.iter().map(|&l| if l.is_nan() { l } else { -l.max(lf) }).collect();
        Self { nx, ny, ranges, values }
    }

    pub fn from_hist(h: &Hist2d, floor: f64) -> Self {
        Self::from_probs(h.bins, h.bins, h.ranges, &h.probs, floor)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ny + j]
    }

    /// Grid as CSV: one line per x index.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.nx {
            let row: Vec<String> = (0..self.ny).map(|j| num(self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// PPM bytes, `scale` pixels per cell, y increasing upwards.
    pub fn to_ppm(&self, span: f64, scale: usize) -> Result<Vec<u8>, RunError> {
        if self.values.len() != self.nx * self.ny || self.nx == 0 || self.ny == 0 {
            return Err(RunError::Config("grid shape does not match its values".into()));
        }
        if let Some(bad) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(RunError::Config(format!("free energy at cell {bad} is not finite")));
        }
        if !(span > 0.0) || scale == 0 {
            return Err(RunError::Config("heatmap needs span > 0 and scale > 0".into()));
        }
        let fmin = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let (w, h) = (self.nx * scale, self.ny * scale);
        let mut img = Image::new(w, h, [0, 0, 0]);
        for py in 0..h {
            let j = self.ny - 1 - py / scale;
            for px in 0..w {
                let i = px / scale;
                img.set(px, py, ramp_color((self.get(i, j) - fmin) / span));
            }
        }
        Ok(img.to_ppm())
    }
}

/// Writes the heatmap to `image_path` and the raw grid to `csv_path`.
pub fn render_heatmap(
    grid: &FreeEnergyGrid,
    span: f64,
    scale: usize,
    image_path: &Path,
    csv_path: &Path,
) -> Result<(), RunError> {
    let bytes = grid.to_ppm(span, scale)?;
    std::fs::write(image_path, bytes).map_err(RunError::io(image_path))?;
    std::fs::write(csv_path, grid.to_csv()).map_err(RunError::io(csv_path))
}

/// RGB raster.
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, pixels: vec![fill; width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = c;
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(3 * self.pixels.len());
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Series colors of [`log_curve_plot`].
pub const SERIES_COLORS: [[u8; 3]; 4] = [[200, 30, 30], [30, 90, 200], [20, 150, 60], [150, 60, 170]];

/// Line plot of positive series on a log10 y axis. `xs` is shared by all
/// series; non-positive values are drawn at the bottom edge. Gridlines mark
/// every power of ten.
pub fn log_curve_plot(xs: &[f64], series: &[Vec<f64>], width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height, [255, 255, 255]);
    let margin = 10i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    if xs.is_empty() || w <= 1 || h <= 1 {
        return img;
    }
    let positive = series.iter().flatten().copied().filter(|v| *v > 0.0);
    let lo = positive.fold(f64::INFINITY, |a, v| a.min(v.log10())).floor().min(-1.0);
    let hi = 0.0f64.max(series.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil());
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| margin + ((x - xmin) / xspan * (w - 1) as f64).round() as i64;
    let py = |v: f64| {
        let l = if v > 0.0 { v.log10().clamp(lo, hi) } else { lo };
        margin + ((hi - l) / (hi - lo) * (h - 1) as f64).round() as i64
    };
    let grey = [210, 210, 210];
    let mut decade = lo;
    while decade <= hi {
        let y = py(10f64.powf(decade));
        img.line((margin, y), (margin + w - 1, y), grey);
        decade += 1.0;
    }
    img.line((margin, margin), (margin, margin + h - 1), [0, 0, 0]);
    img.line((margin, margin + h - 1), (margin + w - 1, margin + h - 1), [0, 0, 0]);
    for (s, ys) in series.iter().enumerate() {
        let c = SERIES_COLORS[s % SERIES_COLORS.len()];
        let pts: Vec<(i64, i64)> = xs.iter().zip(ys).map(|(&x, &y)| (px(x), py(y))).collect();
        for seg in pts.windows(2) {
            img.line(seg[0], seg[1], c);
        }
        for &(x, y) in &pts {
            for d in -1..=1 {
                img.line((x - 1, y + d), (x + 1, y + d), c);
            }
        }
    }
    img
}
