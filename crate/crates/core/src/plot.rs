//! Minimal raster plots: polylines and scatter markers on linear axes, saved as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub type Color = [u8; 3];

pub const PALETTE: [Color; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

#[derive(Clone, Debug, PartialEq)]
pub enum Series {
    Line { points: Vec<(f64, f64)>, color: Color },
    Scatter { points: Vec<(f64, f64)>, color: Color, radius: u32 },
}

impl Series {
    fn points(&self) -> &[(f64, f64)] {
        match self {
            Series::Line { points, .. } | Series::Scatter { points, .. } => points,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, margin: 24, log_y: false, series: Vec::new() }
    }

    pub fn push(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn ty(&self, y: f64) -> f64 {
        if self.log_y {
            y.max(f64::MIN_POSITIVE).log10()
        } else {
            y
        }
    }

    /// Data bounds padded by 5% (a degenerate range is widened to unit size).
    fn bounds(&self) -> Result<[f64; 4]> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points().iter().map(|&(x, y)| (x, self.ty(y))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if pts.is_empty() {
            return Err(Error::Precondition("plot has no finite points".into()));
        }
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
        let mut b = [
            fold(f64::min, f64::INFINITY, |p| p.0),
            fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            fold(f64::min, f64::INFINITY, |p| p.1),
            fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        ];
        for k in [0, 2] {
            let span = b[k + 1] - b[k];
            let pad = if span > 0.0 { 0.05 * span } else { 0.5 };
            b[k] -= pad;
            b[k + 1] += pad;
        }
        Ok(b)
    }

    pub fn render(&self) -> Result<RgbImage> {
        let (w, h, m) = (self.width, self.height, self.margin);
        if w <= 2 * m + 1 || h <= 2 * m + 1 {
            return Err(Error::config("plot too small for its margins"));
        }
        let [x0, x1, y0, y1] = self.bounds()?;
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let (pw, ph) = ((w - 2 * m) as f64, (h - 2 * m) as f64);
        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let px = m as f64 + (x - x0) / (x1 - x0) * pw;
            let py = (h - m) as f64 - (self.ty(y) - y0) / (y1 - y0) * ph;
            (px.round() as i64, py.round() as i64)
        };
        let axis = [0, 0, 0];
        line(&mut img, (m as i64, (h - m) as i64), ((w - m) as i64, (h - m) as i64), axis);
        line(&mut img, (m as i64, m as i64), (m as i64, (h - m) as i64), axis);
        for k in 0..=4 {
            let tx = m as i64 + (k * (w - 2 * m) / 4) as i64;
            let ty = (h - m) as i64 - (k * (h - 2 * m) / 4) as i64;
            line(&mut img, (tx, (h - m) as i64), (tx, (h - m + 4) as i64), axis);
            line(&mut img, (m as i64 - 4, ty), (m as i64, ty), axis);
        }
        for s in &self.series {
            match s {
                Series::Line { points, color } => {
                    let px: Vec<_> = points.iter().filter(|p| p.0.is_finite() && self.ty(p.1).is_finite()).map(|&(x, y)| to_px(x, y)).collect();
                    for pair in px.windows(2) {
                        line(&mut img, pair[0], pair[1], *color);
                    }
                }
                Series::Scatter { points, color, radius } => {
                    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && self.ty(p.1).is_finite()) {
                        disc(&mut img, to_px(x, y), *radius as i64, *color);
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.render()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png: {e}")))
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Color) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Bresenham segment.
fn line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: Color) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
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

fn disc(img: &mut RgbImage, (cx, cy): (i64, i64), r: i64, c: Color) {
    for y in -r..=r {
        for x in -r..=r {
            if x * x + y * y <= r * r {
                put(img, cx + x, cy + y, c);
            }
        }
    }
}
