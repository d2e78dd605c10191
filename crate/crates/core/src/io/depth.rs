//! Depth maps: `DEPTHF32`, u32 width, u32 height (little-endian), then
//! row-major little-endian f32.

use std::path::Path;

use super::{read_bytes, with_path, write_bytes};
use crate::error::Result;
use crate::image::DepthMap;

pub const DEPTH_MAGIC: &[u8; 8] = b"DEPTHF32";

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * d.data.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(b: &[u8]) -> std::result::Result<DepthMap, String> {
    if b.len() < 16 {
        return Err(format!("depth header needs 16 bytes, found {}", b.len()));
    }
    if &b[..8] != DEPTH_MAGIC {
        return Err("not a depth file (bad magic)".into());
    }
    let width = u32::from_le_bytes([b[8], b[9], b[10], b[11]]) as usize;
    let height = u32::from_le_bytes([b[12], b[13], b[14], b[15]]) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or("depth dimensions overflow")?;
    if b.len() != expected {
        return Err(format!(
            "{width}x{height} depth map needs {expected} bytes, found {}",
            b.len()
        ));
    }
    Ok(DepthMap {
        width,
        height,
        data: b[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth(d))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    with_path(path, decode_depth(&read_bytes(path)?))
}
