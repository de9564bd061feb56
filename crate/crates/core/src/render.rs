//! Minimal deterministic raster rendering for the evaluation report.
//!
//! Charts are drawn pixel by pixel with an embedded 5x7 glyph set, so the
//! PNG output depends only on the metric values: no fonts, no timestamps,
//! no platform-dependent rasterization.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const GLYPH_W: u32 = 5;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        _ => [0x00; 7],
    }
}

const BG: Rgb<u8> = Rgb([250, 250, 250]);
const INK: Rgb<u8> = Rgb([30, 30, 30]);
const GRID: Rgb<u8> = Rgb([210, 210, 210]);
const MISSING: Rgb<u8> = Rgb([170, 170, 170]);
const ACCENT: Rgb<u8> = Rgb([38, 110, 190]);

/// Five-anchor gradient over [0, 1].
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let t = v - i as f64;
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([
        mix(STOPS[i][0], STOPS[i + 1][0]),
        mix(STOPS[i][1], STOPS[i + 1][1]),
        mix(STOPS[i][2], STOPS[i + 1][2]),
    ])
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Canvas {
        Canvas {
            img: RgbImage::from_pixel(width, height, BG),
        }
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
        for dy in 0..h as i64 {
            for dx in 0..w as i64 {
                self.put(x + dx, y + dy, color);
            }
        }
    }

    fn frame(&mut self, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
        for dx in 0..w as i64 {
            self.put(x + dx, y, color);
            self.put(x + dx, y + h as i64 - 1, color);
        }
        for dy in 0..h as i64 {
            self.put(x, y + dy, color);
            self.put(x + w as i64 - 1, y + dy, color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for c in s.chars() {
            let rows = glyph(c);
            for (gy, bits) in rows.iter().enumerate() {
                for gx in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - gx) & 1 == 1 {
                        self.put(cx + gx as i64, y + gy as i64, color);
                    }
                }
            }
            cx += GLYPH_W as i64 + 1;
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * (GLYPH_W as i64 + 1)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::format(path, format!("image encode failed: {e}")))
    }
}

/// Vertical bars for a handful of labeled values in [0, 1]; missing values
/// render as gray blocks.
pub fn bar_chart(
    path: &Path,
    labels: &[String],
    values: &[Option<f64>],
    title: &str,
) -> Result<()> {
    let bar_w = 48u32;
    let gap = 24i64;
    let plot_h = 180i64;
    let (left, top) = (40i64, 36i64);
    let width = left as u32 + labels.len() as u32 * (bar_w + gap as u32) + 30;
    let mut canvas = Canvas::new(width, (top + plot_h + 40) as u32);
    canvas.text(10, 10, title, INK);

    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = top + plot_h - (frac * plot_h as f64) as i64;
        canvas.line(left, y, width as i64 - 10, y, GRID);
        canvas.text(6, y - 3, &format!("{frac:.2}"), INK);
    }

    for (i, (label, value)) in labels.iter().zip(values).enumerate() {
        let x = left + 10 + i as i64 * (bar_w as i64 + gap);
        match value {
            Some(v) => {
                let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as i64;
                canvas.rect(x, top + plot_h - h, bar_w, h.max(1) as u32, ACCENT);
                canvas.text(x, top + plot_h - h - 10, &format!("{v:.3}"), INK);
            }
            None => {
                canvas.rect(x, top, bar_w, plot_h as u32, MISSING);
                canvas.text(x + 8, top + plot_h / 2, "NA", INK);
            }
        }
        canvas.text(x + 4, top + plot_h + 8, label, INK);
    }
    canvas.save(path)
}

/// Polyline over ordered categories; gaps where values are missing.
pub fn curve(path: &Path, points: &[(String, Option<f64>)], title: &str) -> Result<()> {
    let plot_w = (points.len().max(2) as i64 * 22).clamp(240, 900);
    let plot_h = 180i64;
    let (left, top) = (40i64, 36i64);
    let mut canvas = Canvas::new((left + plot_w + 20) as u32, (top + plot_h + 44) as u32);
    canvas.text(10, 10, title, INK);

    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = top + plot_h - (frac * plot_h as f64) as i64;
        canvas.line(left, y, left + plot_w, y, GRID);
        canvas.text(6, y - 3, &format!("{frac:.2}"), INK);
    }

    let step = if points.len() > 1 {
        plot_w as f64 / (points.len() - 1) as f64
    } else {
        0.0
    };
    let xy = |i: usize, v: f64| {
        (
            left + (i as f64 * step).round() as i64,
            top + plot_h - (v.clamp(0.0, 1.0) * plot_h as f64).round() as i64,
        )
    };

    let mut prev: Option<(i64, i64)> = None;
    for (i, (_, value)) in points.iter().enumerate() {
        match value {
            Some(v) => {
                let (x, y) = xy(i, *v);
                canvas.rect(x - 1, y - 1, 3, 3, ACCENT);
                if let Some((px, py)) = prev {
                    canvas.line(px, py, x, y, ACCENT);
                }
                prev = Some((x, y));
            }
            None => {
                let x = left + (i as f64 * step).round() as i64;
                canvas.rect(x - 1, top + plot_h - 1, 3, 3, MISSING);
                prev = None;
            }
        }
    }

    // A few x labels: first, middle, last.
    if !points.is_empty() {
        for &i in [0, points.len() / 2, points.len() - 1].iter() {
            let x = left + (i as f64 * step).round() as i64;
            canvas.line(x, top + plot_h, x, top + plot_h + 4, INK);
            let label = &points[i].0;
            canvas.text(x - Canvas::text_width(label) / 2, top + plot_h + 8, label, INK);
        }
    }
    canvas.save(path)
}

/// Color grid with a scale bar; `cells` is row-major with `rows * cols`
/// entries, missing cells drawn gray.
pub fn heatmap(
    path: &Path,
    cells: &[Option<f64>],
    rows: usize,
    cols: usize,
    title: &str,
) -> Result<()> {
    assert_eq!(cells.len(), rows * cols, "cell count must match grid shape");
    let cell: i64 = if cols > 60 { 6 } else { 14 };
    let (left, top) = (24i64, 36i64);
    let width = (left + cols as i64 * cell + 60) as u32;
    let height = (top + (rows.max(5)) as i64 * cell + 24) as u32;
    let mut canvas = Canvas::new(width, height);
    canvas.text(10, 10, title, INK);

    for r in 0..rows {
        for c in 0..cols {
            let color = match cells[r * cols + c] {
                Some(v) => colormap(v),
                None => MISSING,
            };
            canvas.rect(
                left + c as i64 * cell,
                top + r as i64 * cell,
                cell as u32,
                cell as u32,
                color,
            );
        }
    }
    canvas.frame(
        left,
        top,
        (cols as i64 * cell) as u32,
        (rows as i64 * cell) as u32,
        INK,
    );

    // Scale bar.
    let bar_x = left + cols as i64 * cell + 16;
    let bar_h = (rows.max(5) as i64 * cell).min(160);
    for i in 0..bar_h {
        let v = 1.0 - i as f64 / (bar_h - 1) as f64;
        canvas.rect(bar_x, top + i, 10, 1, colormap(v));
    }
    canvas.text(bar_x + 14, top, "1.0", INK);
    canvas.text(bar_x + 14, top + bar_h - 7, "0.0", INK);
    canvas.save(path)
}

/// Annotated 4x4 confusion grid (row-normalized values as percent).
pub fn confusion_grid(
    path: &Path,
    matrix: &[[Option<f64>; 4]; 4],
    labels: &[String],
) -> Result<()> {
    let cell_w = 72i64;
    let cell_h = 44i64;
    let (left, top) = (56i64, 48i64);
    let width = (left + 4 * cell_w + 20) as u32;
    let height = (top + 4 * cell_h + 24) as u32;
    let mut canvas = Canvas::new(width, height);
    canvas.text(10, 10, "CONFUSION TRUE/PRED", INK);

    for (i, label) in labels.iter().enumerate() {
        canvas.text(
            left + i as i64 * cell_w + cell_w / 2 - Canvas::text_width(label) / 2,
            top - 12,
            label,
            INK,
        );
        canvas.text(10, top + i as i64 * cell_h + cell_h / 2 - 3, label, INK);
    }

    for r in 0..4 {
        for c in 0..4 {
            let x = left + c as i64 * cell_w;
            let y = top + r as i64 * cell_h;
            match matrix[r][c] {
                Some(v) => {
                    canvas.rect(x, y, cell_w as u32, cell_h as u32, colormap(v));
                    let text = format!("{:.1}%", v * 100.0);
                    let ink = if v > 0.6 {
                        Rgb([20, 20, 20])
                    } else {
                        Rgb([240, 240, 240])
                    };
                    canvas.text(
                        x + cell_w / 2 - Canvas::text_width(&text) / 2,
                        y + cell_h / 2 - 3,
                        &text,
                        ink,
                    );
                }
                None => {
                    canvas.rect(x, y, cell_w as u32, cell_h as u32, MISSING);
                    canvas.text(x + cell_w / 2 - 6, y + cell_h / 2 - 3, "NA", INK);
                }
            }
            canvas.frame(x, y, cell_w as u32, cell_h as u32, INK);
        }
    }
    canvas.save(path)
}
