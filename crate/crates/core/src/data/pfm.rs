//! Single-channel Portable Float Map (`Pf`) files.
//!
//! The header is `Pf`, then width and height, then a scale whose sign gives
//! the byte order (negative: little-endian). Rows are stored bottom to top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PFM",
        reason: reason.into(),
    }
}

/// Encodes a `[H,W]`, `[1,H,W]` or `[1,1,H,W]` map as little-endian PFM.
pub fn encode_pfm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_extents(map.shape())?;
    let header = format!("Pf\n{w} {h}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + 4 * h * w);
    out.extend_from_slice(header.as_bytes());
    for row in map.data().chunks_exact(w).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn plane_extents(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [1, h, w] | [1, 1, h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape("pfm", format!("expected a single-channel map, got {shape:?}"))),
    }
}

/// Reads the next whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| malformed("header is not ASCII"))
}

/// Decodes a grayscale PFM into a `[1,1,H,W]` tensor.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(malformed("three-channel `PF` maps are not supported")),
        other => return Err(malformed(format!("bad magic `{other}`"))),
    }
    let dim = |t: &str| t.parse::<usize>().ok().filter(|&v| v > 0);
    let w = dim(token(bytes, &mut pos)?).ok_or_else(|| malformed("bad width"))?;
    let h = dim(token(bytes, &mut pos)?).ok_or_else(|| malformed("bad height"))?;
    let scale: f32 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| malformed("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed("scale must be finite and non-zero"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("truncated header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let n = h.checked_mul(w).and_then(|n| n.checked_mul(4)).ok_or_else(|| malformed("extents overflow"))?;
    if payload.len() < n {
        return Err(malformed(format!("payload has {} bytes, expected {n}", payload.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; h * w];
    for (k, chunk) in payload[..n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, x) = (k / w, k % w);
        data[(h - 1 - file_row) * w + x] = v;
    }
    Tensor::new(&[1, 1, h, w], data)
}

pub fn write_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pfm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    decode_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
