//! Binary PPM (P6) and PGM (P5) files with maxval 255.
//!
//! Writers always emit the canonical header `P6\n<w> <h>\n255\n`. The reader
//! also accepts arbitrary whitespace and `#` comments in the header.

use std::fs;
use std::path::Path;

use midm_core::grid::RgbImage;

use crate::error::{io_err, HarnessError, Result};

fn parse_err(offset: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse { offset, message: message.into() }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
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
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a P5/P6 payload; returns `(width, height, channels, pixels)`.
fn decode(bytes: &[u8], expect: &[u8; 2]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != expect {
        return Err(parse_err(0, format!("expected magic {}", String::from_utf8_lossy(expect))));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = {
        r.skip_space();
        r.pos
    };
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} is not supported (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "image dimensions must be positive"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(parse_err(r.pos, "expected a single whitespace byte after maxval")),
    }
    let channels = if expect == b"P6" { 3 } else { 1 };
    let expected = width * height * channels;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(parse_err(
            r.pos + payload.len(),
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(parse_err(r.pos + expected, format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    Ok((width, height, payload.to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, data) = decode(bytes, b"P6")?;
    Ok(RgbImage::new(w, h, data)?)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Grayscale plane as `(width, height, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P5")
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "PGM payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|e| match e {
        HarnessError::Parse { offset, message } => {
            HarnessError::Parse { offset, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(io_err(path))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(io_err(path))
}
