//! Minimal raster plotting: shift-surface heatmaps and miss-rate vs FPPI
//! curves rendered straight into RGB PNG files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use wald::eval::{MrCurvePoint, SweepPoint};

pub struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>, // rgb
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: vec![255; w * h * 3] }
    }

    pub fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let at = (y as usize * self.w + x as usize) * 3;
        self.px[at..at + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                self.set(x, y, rgb);
            }
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        // Bresenham
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, rgb);
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

    pub fn text(&mut self, x: i64, y: i64, s: &str, rgb: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            draw_glyph(self, cx, y, ch, rgb);
            cx += 6;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .with_context(|| format!("cannot create plot file {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.px)?;
        Ok(())
    }
}

/// 5x7 bitmap glyphs for the handful of characters the axes need.
fn glyph_rows(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x13, 0x0D],
        _ => [0; 7],
    }
}

fn draw_glyph(canvas: &mut Canvas, x: i64, y: i64, ch: char, rgb: [u8; 3]) {
    for (ry, row) in glyph_rows(ch).iter().enumerate() {
        for rx in 0..5 {
            if row & (0x10 >> rx) != 0 {
                canvas.set(x + rx as i64, y + ry as i64, rgb);
            }
        }
    }
}

/// Blue -> white -> red diverging colormap over [0, 1].
fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t) as u8;
    if v < 0.5 {
        let t = v / 0.5;
        [lerp(38.0, 245.0, t), lerp(80.0, 245.0, t), lerp(180.0, 245.0, t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [lerp(245.0, 190.0, t), lerp(245.0, 40.0, t), lerp(245.0, 45.0, t)]
    }
}

/// Render a shift-surface as a heatmap with a value colorbar.
pub fn plot_surface(points: &[SweepPoint], path: &Path) -> Result<()> {
    anyhow::ensure!(!points.is_empty(), "empty shift surface");
    let min_dx = points.iter().map(|p| p.dx).min().unwrap();
    let max_dx = points.iter().map(|p| p.dx).max().unwrap();
    let min_dy = points.iter().map(|p| p.dy).min().unwrap();
    let max_dy = points.iter().map(|p| p.dy).max().unwrap();
    let lo = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let cell = 26i64;
    let margin = 40i64;
    let cols = (max_dx - min_dx + 1) as i64;
    let rows = (max_dy - min_dy + 1) as i64;
    let bar_w = 50i64;
    let w = margin * 2 + cols * cell + bar_w;
    let h = margin * 2 + rows * cell;
    let mut canvas = Canvas::new(w as usize, h as usize);

    for p in points {
        let cx = margin + (p.dx - min_dx) as i64 * cell;
        let cy = margin + (p.dy - min_dy) as i64 * cell;
        let t = (p.value - lo) / span;
        canvas.fill_rect(cx, cy, cx + cell - 1, cy + cell - 1, colormap(t));
    }
    // axes labels: dx along the bottom, dy along the left
    canvas.text(margin, h - margin + 8, &format!("dx {min_dx}..{max_dx}"), [0, 0, 0]);
    canvas.text(4, margin - 16, &format!("dy {min_dy}..{max_dy}"), [0, 0, 0]);
    // colorbar
    let bx = margin + cols * cell + 14;
    for i in 0..(rows * cell) {
        let t = 1.0 - i as f64 / (rows * cell - 1) as f64;
        let color = colormap(t);
        for x in bx..bx + 16 {
            canvas.set(x, margin + i, color);
        }
    }
    canvas.text(bx, margin - 16, &format!("{hi:.3}"), [0, 0, 0]);
    canvas.text(bx, margin + rows * cell + 4, &format!("{lo:.3}"), [0, 0, 0]);
    canvas.save(path)
}

/// Render a miss-rate vs FPPI curve with a log-scaled FPPI axis.
pub fn plot_mr_curve(curve: &[MrCurvePoint], path: &Path) -> Result<()> {
    anyhow::ensure!(!curve.is_empty(), "empty miss-rate curve");
    let (w, h) = (560i64, 420i64);
    let (ml, mr, mt, mb) = (60i64, 20i64, 20i64, 50i64);
    let mut canvas = Canvas::new(w as usize, h as usize);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let x_of = |fppi: f64| -> i64 {
        // log scale over [1e-2, 1e0], clamped
        let lf = fppi.max(1e-2).log10().clamp(-2.0, 0.0);
        ml + ((lf + 2.0) / 2.0 * plot_w as f64) as i64
    };
    let y_of = |miss: f64| -> i64 { mt + ((1.0 - miss.clamp(0.0, 1.0)) * plot_h as f64) as i64 };

    // frame and gridlines at fppi decades and miss-rate quarters
    canvas.line(ml, mt, ml, h - mb, [0, 0, 0]);
    canvas.line(ml, h - mb, w - mr, h - mb, [0, 0, 0]);
    for (v, label) in [(0.01, "0.01"), (0.1, "0.1"), (1.0, "1")] {
        let x = x_of(v);
        canvas.line(x, mt, x, h - mb, [225, 225, 225]);
        canvas.text(x - 10, h - mb + 8, label, [0, 0, 0]);
    }
    for q in [0.25, 0.5, 0.75, 1.0] {
        let y = y_of(q);
        canvas.line(ml, y, w - mr, y, [225, 225, 225]);
        canvas.text(8, y - 3, &format!("{q:.2}"), [0, 0, 0]);
    }
    canvas.text(w / 2 - 20, h - 20, "FPPI", [0, 0, 0]);
    canvas.text(8, mt - 12, "MR", [0, 0, 0]);

    // step curve from high to low threshold
    let mut sorted: Vec<&MrCurvePoint> = curve.iter().collect();
    sorted.sort_by(|a, b| a.fppi.partial_cmp(&b.fppi).unwrap());
    let color = [200, 30, 30];
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (xa, ya) = (x_of(a.fppi), y_of(a.miss_rate));
        let (xb, yb) = (x_of(b.fppi), y_of(b.miss_rate));
        canvas.line(xa, ya, xb, ya, color); // horizontal run
        canvas.line(xb, ya, xb, yb, color); // vertical drop
    }
    if let Some(p) = sorted.first() {
        canvas.line(x_of(0.01), y_of(p.miss_rate), x_of(p.fppi), y_of(p.miss_rate), color);
    }
    canvas.save(path)
}
