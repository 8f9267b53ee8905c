//! Binary 8-bit PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "pgm".into(),
        offset,
        reason: reason.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(format_err(0, "missing P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(format_err(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = {
        h.skip_space();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(max_at, format!("maxval {maxval} is not 255")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(format_err(h.pos, "expected one whitespace byte before the raster")),
    }
    if width == 0 || height == 0 {
        return Err(format_err(h.pos, "zero image dimension"));
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| format_err(h.pos, "image dimensions overflow"))?;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(format_err(h.pos + need, "trailing bytes after raster"));
    }
    GrayImage::new(width, height, raster.to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fsutil::read(path)?).map_err(|e| match e {
        Error::Format { offset, reason, .. } => Error::Format {
            what: format!("pgm {}", path.display()),
            offset,
            reason,
        },
        other => other,
    })
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fsutil::atomic_write(path, &encode_pgm(image))
}

/// Quantizes `[0, 1]` intensities (clamped) to 8 bits.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Rescales a score map to the full 8-bit range; a constant map renders
/// black.
pub fn heatmap(width: usize, height: usize, scores: &[f64]) -> Result<GrayImage> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = scores
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    GrayImage::new(width, height, quantize(&scaled))
}
