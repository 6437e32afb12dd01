//! Bare-bones line charts rasterised straight into a [`GrayImage`].

use crate::image::GrayImage;

const WHITE: u8 = 255;
const BLACK: u8 = 0;
const GRID: u8 = 225;
const MARGIN_LEFT: i64 = 44;
const MARGIN_RIGHT: i64 = 12;
const MARGIN_TOP: i64 = 12;
const MARGIN_BOTTOM: i64 = 22;

/// One named polyline; point `i` is plotted at x = `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    /// Gray level the line is drawn with.
    pub shade: u8,
    pub dashed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub series: Vec<Series>,
    pub width: usize,
    pub height: usize,
}

impl LineChart {
    pub fn new(width: usize, height: usize) -> Self {
        LineChart {
            series: Vec::new(),
            width,
            height,
        }
    }

    pub fn with_series(mut self, name: &str, values: Vec<f64>, shade: u8, dashed: bool) -> Self {
        self.series.push(Series {
            name: name.to_string(),
            values,
            shade,
            dashed,
        });
        self
    }

    /// Y range covering every finite value, padded when degenerate.
    pub fn y_range(&self) -> (f64, f64) {
        let finite = self
            .series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    }

    fn points(&self) -> usize {
        self.series
            .iter()
            .map(|s| s.values.len())
            .max()
            .unwrap_or(0)
    }

    pub fn render(&self) -> GrayImage {
        let mut img = GrayImage::filled(self.width, self.height, WHITE);
        let (w, h) = (self.width as i64, self.height as i64);
        let (x0, x1) = (MARGIN_LEFT, w - MARGIN_RIGHT);
        let (y0, y1) = (MARGIN_TOP, h - MARGIN_BOTTOM);
        if x1 <= x0 || y1 <= y0 {
            return img;
        }
        let (lo, hi) = self.y_range();
        let n = self.points().max(2);
        let to_px = |i: usize, v: f64| -> (i64, i64) {
            let x = x0 + ((i as f64) / ((n - 1) as f64) * (x1 - x0) as f64).round() as i64;
            let y = y1 - (((v - lo) / (hi - lo)) * (y1 - y0) as f64).round() as i64;
            (x, y)
        };

        for k in 0..=4 {
            let y = y1 - (y1 - y0) * k / 4;
            for x in x0..=x1 {
                img.put(x, y, GRID);
            }
        }
        for y in y0..=y1 {
            img.put(x0, y, BLACK);
        }
        for x in x0..=x1 {
            img.put(x, y1, BLACK);
        }
        draw_text(&mut img, &format_tick(hi), 2, y0 - 2);
        draw_text(&mut img, &format_tick(lo), 2, y1 - 4);
        draw_text(&mut img, "1", x0 - 1, y1 + 6);
        let last = n.to_string();
        draw_text(&mut img, &last, x1 - 4 * last.len() as i64 + 1, y1 + 6);

        for s in &self.series {
            let pts: Vec<(i64, i64)> = s
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| to_px(i, v))
                .collect();
            if let [only] = pts[..] {
                img.put(only.0, only.1, s.shade);
            }
            for pair in pts.windows(2) {
                draw_line(&mut img, pair[0], pair[1], s.shade, s.dashed);
            }
        }
        img
    }
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s.len() > 10 {
        format!("{v:.0}")
    } else {
        s
    }
}

/// Bresenham line; dashed lines skip every other run of four pixels.
fn draw_line(img: &mut GrayImage, from: (i64, i64), to: (i64, i64), shade: u8, dashed: bool) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut step = 0u32;
    loop {
        if !dashed || (step / 4).is_multiple_of(2) {
            img.put(x, y, shade);
        }
        step += 1;
        if (x, y) == to {
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

/// 3x5 bitmaps for digits, '.', '-' and 'e'; each row is three bits.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

pub(crate) fn draw_text(img: &mut GrayImage, text: &str, x: i64, y: i64) {
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let left = x + 4 * i as i64;
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 {
                    img.put(left + dx, y + dy as i64, BLACK);
                }
            }
        }
    }
}
