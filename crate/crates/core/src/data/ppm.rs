//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parses a P5 or P6 byte buffer; samples are scaled to `[0, 1]` by maxval.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(c.err("file too short for magic number"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(c.err("bad magic, expected P5 or P6")),
    };
    c.pos = 2;
    if c.pos < bytes.len() && !bytes[c.pos].is_ascii_whitespace() && bytes[c.pos] != b'#' {
        return Err(c.err("missing whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(c.err(format!("maxval {maxval} unsupported, need 1..=255")));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(c.err("expected single whitespace before raster"));
    }
    c.pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| c.err("image too large"))?;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated raster: expected {need} bytes, found {have}"),
        });
    }
    let scale = maxval as f64;
    let pixels = bytes[c.pos..c.pos + need]
        .iter()
        .map(|&b| (b as f64).min(scale) / scale)
        .collect();
    Image::new(height, width, channels, pixels)
}

/// P6 for three channels, P5 for one. Values are clamped to `[0, 1]` and
/// rounded half-up to 8 bits.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0 + 0.5).floor() as u8
    }));
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pnm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
