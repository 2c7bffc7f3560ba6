//! Minimal deterministic chart rendering: PNG line charts and bar charts
//! drawn pixel-by-pixel with an embedded 5×7 bitmap font, so report images
//! carry no font or windowing dependencies and are byte-stable across runs.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
pub const GRAY: Rgb<u8> = Rgb([200, 200, 200]);

/// Fixed series palette.
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// 5×7 glyphs, one byte per row, low five bits used (bit 4 = left column).
fn glyph(c: char) -> [u8; 7] {
    let c = c.to_ascii_uppercase();
    match c {
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
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        _ => [0x00; 7],
    }
}

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Canvas {
        Canvas {
            img: RgbImage::from_pixel(width, height, WHITE),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    /// Draw `text` with its top-left corner at (x, y); 6 px advance.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Rgb<u8>) {
        let mut cx = x;
        for c in text.chars() {
            let rows = glyph(c);
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if row & (1 << (4 - rx)) != 0 {
                        self.put(cx + rx, y + ry as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn text_width(text: &str) -> i64 {
        6 * text.chars().count() as i64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Compact tick label: fixed decimals trimmed of trailing zeros.
fn tick_label(v: f64) -> String {
    let s = if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.001) {
        format!("{v:.1e}")
    } else {
        format!("{v:.4}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart over one or more series, with axes, ticks, and a legend.
pub fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    let (width, height) = (800u32, 500u32);
    let (left, right, top, bottom) = (70i64, 25i64, 40i64, 50i64);
    let (pw, ph) = (width as i64 - left - right, height as i64 - top - bottom);
    let mut canvas = Canvas::new(width, height);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_lo, mut x_hi) = bounds(all.iter().map(|p| p.0));
    let (mut y_lo, mut y_hi) = bounds(all.iter().map(|p| p.1));
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let pad = (y_hi - y_lo) * 0.05;
    y_lo -= pad;
    y_hi += pad;
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            left + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64,
            top + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64).round() as i64,
        )
    };

    for i in 0..=4 {
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let (_, py) = to_px(x_lo, fy);
        canvas.line(left, py, left + pw, py, GRAY);
        let label = tick_label(fy);
        canvas.text(left - Canvas::text_width(&label) - 4, py - 3, &label, BLACK);

        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let (px, _) = to_px(fx, y_lo);
        canvas.line(px, top + ph, px, top + ph + 4, BLACK);
        let label = tick_label(fx);
        canvas.text(px - Canvas::text_width(&label) / 2, top + ph + 8, &label, BLACK);
    }
    canvas.line(left, top, left, top + ph, BLACK);
    canvas.line(left, top + ph, left + pw, top + ph, BLACK);
    canvas.text(left, 12, title, BLACK);
    canvas.text(
        left + pw - Canvas::text_width(x_label),
        top + ph + 24,
        x_label,
        BLACK,
    );

    let mut legend_y = top + 6;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            canvas.line(x0, y0, x1, y1, color);
        }
        for &(x, y) in &s.points {
            let (px, py) = to_px(x, y);
            canvas.fill_rect(px - 1, py - 1, 3, 3, color);
        }
        if series.len() > 1 {
            let lx = left + pw - 150;
            canvas.fill_rect(lx, legend_y, 10, 3, color);
            canvas.text(lx + 14, legend_y - 2, &s.label, BLACK);
            legend_y += 12;
        }
    }
    canvas.save(path)
}

/// Vertical bar chart with value labels above each bar.
pub fn bar_chart(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    assert_eq!(labels.len(), values.len());
    let (width, height) = (800u32, 500u32);
    let (left, right, top, bottom) = (70i64, 25i64, 40i64, 60i64);
    let (pw, ph) = (width as i64 - left - right, height as i64 - top - bottom);
    let mut canvas = Canvas::new(width, height);

    let hi = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12) * 1.1;
    let n = values.len().max(1) as i64;
    let slot = pw / n;
    let bar_w = (slot * 3 / 4).max(1);

    for i in 0..=4 {
        let fy = hi * i as f64 / 4.0;
        let py = top + ph - (fy / hi * ph as f64).round() as i64;
        canvas.line(left, py, left + pw, py, GRAY);
        let label = tick_label(fy);
        canvas.text(left - Canvas::text_width(&label) - 4, py - 3, &label, BLACK);
    }
    canvas.line(left, top, left, top + ph, BLACK);
    canvas.line(left, top + ph, left + pw, top + ph, BLACK);
    canvas.text(left, 12, title, BLACK);

    for (i, (label, &value)) in labels.iter().zip(values).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = left + i as i64 * slot + (slot - bar_w) / 2;
        let bh = (value.max(0.0) / hi * ph as f64).round() as i64;
        canvas.fill_rect(x, top + ph - bh, bar_w, bh, color);
        let vlabel = tick_label(value);
        canvas.text(
            x + (bar_w - Canvas::text_width(&vlabel)) / 2,
            top + ph - bh - 10,
            &vlabel,
            BLACK,
        );
        canvas.text(
            x + (bar_w - Canvas::text_width(label)) / 2,
            top + ph + 8,
            label,
            BLACK,
        );
    }
    canvas.save(path)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}
