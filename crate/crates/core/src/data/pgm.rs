//! Binary 8-bit portable graymap ("P5") encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Raster};

pub fn encode(raster: &Raster<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend_from_slice(raster.pixels());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster<u8>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(0, "missing P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    if !bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(Error::parse(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(
            maxval_at,
            format!("degenerate extents {width}×{height}"),
        ));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::parse(
            maxval_at,
            format!("maxval {maxval} is not an 8-bit depth"),
        ));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(
            h.pos,
            "expected a single whitespace byte before pixel data",
        ));
    }
    let start = h.pos + 1;
    let expected = width * height;
    let actual = bytes.len() - start;
    if actual < expected {
        return Err(Error::parse(
            start,
            format!("truncated pixel data: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(Error::parse(
            start + expected,
            format!("{} trailing bytes after pixel data", actual - expected),
        ));
    }
    let mut pixels = bytes[start..].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p).min(maxval as u8) as usize * 255 / maxval) as u8;
        }
    }
    Raster::new(height, width, pixels)
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster<u8>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_raster(raster: &Raster<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(raster)).map_err(|e| Error::io(path, e))
}

/// Rounds `[0, 1]` intensities to 8 bits.
pub fn quantize(image: &Image) -> Raster<u8> {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn dequantize(raster: &Raster<u8>) -> Image {
    raster.map(|v| v as f32 / 255.0)
}

pub fn mask_to_raster(mask: &Mask) -> Raster<u8> {
    mask.map(|m| if m { 255 } else { 0 })
}

pub fn raster_to_mask(raster: &Raster<u8>) -> Mask {
    raster.map(|v| v >= 128)
}
