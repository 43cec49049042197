//! Binary portable graymap (`P5`) files with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridRole};

/// Encodes `grid` with values scaled to `0..=255` and rounded.
pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write(path: &Path, grid: &Grid) -> Result<()> {
    std::fs::write(path, encode(grid)).map_err(|e| Error::io(path, e))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Graymap {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses the header and returns `(width, height, maxval, payload offset)`.
fn header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad(path, "missing P5 magic"));
    }
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for field in &mut fields {
        // whitespace and comments before each number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "malformed header"));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

/// Reads an 8-bit graymap as an image with values `byte / maxval`.
pub fn read_image(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, offset) = header(&bytes, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h {
        return Err(bad(
            path,
            format!("expected {} pixel bytes, found {}", w * h, payload.len()),
        ));
    }
    let scale = maxval as f64;
    let data = payload
        .iter()
        .map(|&b| (b as f64 / scale).min(1.0))
        .collect();
    Grid::new(h, w, data, GridRole::Image).map_err(|e| bad(path, e.to_string()))
}

/// Reads a graymap and binarizes it at 128.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let img = read_image(path)?;
    let (h, w) = (img.height(), img.width());
    let data = img
        .data()
        .iter()
        .map(|&v| if quantize(v) >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Grid::from_clamped(h, w, data, GridRole::BinaryMask))
}
