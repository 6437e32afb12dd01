//! 8-bit grayscale images and binary PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Sets a pixel, silently ignoring coordinates outside the image.
    pub fn put(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = value;
        }
    }

    /// Copies `other` with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, other: &GrayImage, x: usize, y: usize) {
        for row in 0..other.height {
            for col in 0..other.width {
                self.put((x + col) as i64, (y + row) as i64, other.get(col, row));
            }
        }
    }

    /// Lays `tiles` out left-to-right, top-to-bottom, `columns` per row,
    /// separated by `gap` pixels of `background`. Tiles must share one size.
    pub fn grid(tiles: &[GrayImage], columns: usize, gap: usize, background: u8) -> Result<Self> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::domain("image grid needs at least one tile"))?;
        if columns == 0 {
            return Err(Error::config("image grid needs at least one column"));
        }
        if tiles
            .iter()
            .any(|t| t.width != first.width || t.height != first.height)
        {
            return Err(Error::shape("image grid tiles differ in size"));
        }
        let columns = columns.min(tiles.len());
        let rows = tiles.len().div_ceil(columns);
        let width = columns * first.width + (columns - 1) * gap;
        let height = rows * first.height + (rows - 1) * gap;
        let mut out = GrayImage::filled(width, height, background);
        for (i, tile) in tiles.iter().enumerate() {
            let (r, c) = (i / columns, i % columns);
            out.blit(tile, c * (first.width + gap), r * (first.height + gap));
        }
        Ok(out)
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn scaled(&self, factor: usize) -> GrayImage {
        let factor = factor.max(1);
        let mut out = GrayImage::filled(self.width * factor, self.height * factor, 0);
        for y in 0..out.height {
            for x in 0..out.width {
                out.pixels[y * out.width + x] = self.get(x / factor, y / factor);
            }
        }
        out
    }

    /// Upscales by the largest integer factor that fits a `size` square and
    /// centres the result on a `size`×`size` canvas of `background`.
    pub fn fit_square(&self, size: usize, background: u8) -> GrayImage {
        let factor = (size / self.width.max(self.height).max(1)).max(1);
        let big = self.scaled(factor);
        let mut out = GrayImage::filled(size, size, background);
        out.blit(
            &big,
            size.saturating_sub(big.width) / 2,
            size.saturating_sub(big.height) / 2,
        );
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a binary PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "PGM header ends early"));
        }
        fields.push((
            start,
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        ));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(
            0,
            format!("not a binary PGM (magic {:?})", fields[0].1),
        ));
    }
    let number = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::format(fields[i].0, format!("bad PGM number {:?}", fields[i].1)))
    };
    let (width, height, maxval) = (number(1)?, number(2)?, number(3)?);
    if maxval != 255 {
        return Err(Error::format(
            fields[3].0,
            format!("unsupported PGM maxval {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(Error::format(
            pos,
            format!(
                "PGM raster has {} bytes, expected {}",
                pixels.len(),
                width * height
            ),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn quantize(value: f64, lo: f64, hi: f64) -> u8 {
    let scaled = (value - lo) / (hi - lo) * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

fn rank2(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| {
        Error::shape(format!(
            "grayscale export needs a rank-2 tensor, got {:?}",
            t.shape()
        ))
    })
}

/// Min-max scales a rank-2 tensor to 0..=255; a constant tensor maps to 128.
pub fn to_gray(t: &Tensor) -> Result<GrayImage> {
    let (height, width) = rank2(t)?;
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        t.data().iter().map(|&v| quantize(v, lo, hi)).collect()
    } else {
        vec![128; t.len()]
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Maps `[lo, hi]` linearly to 0..=255, clamping values outside the range.
pub fn to_gray_fixed(t: &Tensor, lo: f64, hi: f64) -> Result<GrayImage> {
    let (height, width) = rank2(t)?;
    Ok(GrayImage {
        width,
        height,
        pixels: t.data().iter().map(|&v| quantize(v, lo, hi)).collect(),
    })
}

/// Min-max normalised PGM export of a rank-2 tensor.
pub fn export_gray_image(t: &Tensor, path: &Path) -> Result<GrayImage> {
    let img = to_gray(t)?;
    img.save_pgm(path)?;
    Ok(img)
}
