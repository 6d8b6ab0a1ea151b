//! Static plot rendering: trajectory XY projections and per-point
//! confidence scatters, drawn directly into PNG images.

use anyhow::Result;
use image::{Rgb, RgbImage};

const MARGIN: u32 = 24;

pub struct Canvas {
    img: RgbImage,
    min: (f64, f64),
    scale: f64,
    height: u32,
}

impl Canvas {
    /// Fit a drawing area around the given world-coordinate points.
    pub fn fit(points: &[(f64, f64)], width: u32, height: u32) -> Canvas {
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            min.0 = min.0.min(x);
            min.1 = min.1.min(y);
            max.0 = max.0.max(x);
            max.1 = max.1.max(y);
        }
        if !min.0.is_finite() {
            min = (0.0, 0.0);
            max = (1.0, 1.0);
        }
        // Degenerate extents still need a usable scale.
        let span_x = (max.0 - min.0).max(1e-6);
        let span_y = (max.1 - min.1).max(1e-6);
        let usable_w = (width - 2 * MARGIN) as f64;
        let usable_h = (height - 2 * MARGIN) as f64;
        let scale = (usable_w / span_x).min(usable_h / span_y);
        let mut img = RgbImage::new(width, height);
        for p in img.pixels_mut() {
            *p = Rgb([250, 250, 250]);
        }
        let mut canvas = Canvas {
            img,
            min,
            scale,
            height,
        };
        canvas.draw_axes();
        canvas
    }

    fn draw_axes(&mut self) {
        let (w, h) = (self.img.width(), self.img.height());
        let grey = Rgb([200, 200, 200]);
        for x in MARGIN..w - MARGIN {
            self.img.put_pixel(x, h - MARGIN, grey);
            self.img.put_pixel(x, MARGIN, grey);
        }
        for y in MARGIN..h - MARGIN {
            self.img.put_pixel(MARGIN, y, grey);
            self.img.put_pixel(w - MARGIN, y, grey);
        }
    }

    fn to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let px = MARGIN as f64 + (x - self.min.0) * self.scale;
        // Flip y so "up" in world coordinates is up in the image.
        let py = (self.height - MARGIN) as f64 - (y - self.min.1) * self.scale;
        (px.round() as i64, py.round() as i64)
    }

    pub fn dot(&mut self, x: f64, y: f64, radius: i64, color: Rgb<u8>) {
        let (cx, cy) = self.to_pixel(x, y);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy > radius * radius {
                    continue;
                }
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0
                    && py >= 0
                    && (px as u32) < self.img.width()
                    && (py as u32) < self.img.height()
                {
                    self.img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let (x0, y0) = self.to_pixel(a.0, a.1);
        let (x1, y1) = self.to_pixel(b.0, b.1);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height()
            {
                self.img.put_pixel(x as u32, y as u32, color);
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

    pub fn polyline(&mut self, points: &[(f64, f64)], color: Rgb<u8>) {
        for pair in points.windows(2) {
            self.line(pair[0], pair[1], color);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// XY projection of one or two trajectories.
pub fn plot_trajectories(
    estimate: &[(f64, f64)],
    gt: Option<&[(f64, f64)]>,
    path: &std::path::Path,
) -> Result<()> {
    let mut all: Vec<(f64, f64)> = estimate.to_vec();
    if let Some(g) = gt {
        all.extend_from_slice(g);
    }
    let mut canvas = Canvas::fit(&all, 800, 800);
    if let Some(g) = gt {
        canvas.polyline(g, Rgb([120, 120, 120]));
    }
    canvas.polyline(estimate, Rgb([30, 80, 220]));
    if let Some(first) = estimate.first() {
        canvas.dot(first.0, first.1, 4, Rgb([20, 160, 20]));
    }
    if let Some(last) = estimate.last() {
        canvas.dot(last.0, last.1, 4, Rgb([220, 40, 40]));
    }
    canvas.save(path)
}

/// Scatter of points colored by confidence: red (low) to green (high).
pub fn plot_confidence(points: &[(f64, f64, f64)], path: &std::path::Path) -> Result<()> {
    let xy: Vec<(f64, f64)> = points.iter().map(|&(x, y, _)| (x, y)).collect();
    let mut canvas = Canvas::fit(&xy, 800, 800);
    for &(x, y, c) in points {
        let c = c.clamp(0.0, 1.0);
        let color = Rgb([
            (220.0 * (1.0 - c) + 30.0 * c) as u8,
            (40.0 * (1.0 - c) + 190.0 * c) as u8,
            50,
        ]);
        canvas.dot(x, y, 2, color);
    }
    canvas.save(path)
}
