//! Binary PPM (P6) images with 8-bit samples.

use std::path::Path;

use thiserror::Error;

use crate::augment::Image;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a binary PPM (P6) file")]
    Magic,
    #[error("malformed PPM header: {0}")]
    Header(String),
    #[error("PPM pixel data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// Parses one header token, skipping whitespace and `#` comments.
fn token(buf: &[u8], pos: &mut usize) -> Result<usize, PpmError> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PpmError::Header(format!("expected a number at byte {start}")))
}

pub fn decode(buf: &[u8]) -> Result<Image, PpmError> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(PpmError::Magic);
    }
    let mut pos = 2;
    let w = token(buf, &mut pos)?;
    let h = token(buf, &mut pos)?;
    let maxval = token(buf, &mut pos)?;
    if w == 0 || h == 0 {
        return Err(PpmError::Header(format!("zero dimension {w}×{h}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(PpmError::Header(format!("maxval {maxval} is not an 8-bit depth")));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(PpmError::Header("missing whitespace before pixel data".into()));
    }
    pos += 1;
    let expected = w * h * 3;
    let data = &buf[pos..];
    if data.len() < expected {
        return Err(PpmError::Truncated { expected, got: data.len() });
    }
    let scale = maxval as f32;
    Ok(Image::new(h, w, data[..expected].iter().map(|&b| (f32::from(b) / scale).min(1.0)).collect()).expect("dims match"))
}

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn read(path: &Path) -> Result<Image, PpmError> {
    let buf = std::fs::read(path).map_err(|source| PpmError::Io { path: path.display().to_string(), source })?;
    decode(&buf)
}

pub fn write(path: &Path, img: &Image) -> Result<(), PpmError> {
    std::fs::write(path, encode(img)).map_err(|source| PpmError::Io { path: path.display().to_string(), source })
}
