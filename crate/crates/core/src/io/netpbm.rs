//! Binary PPM (P6, 8-bit RGB) and PGM (P5, 8- or 16-bit big-endian) images.

use std::path::Path;

use super::{read_bytes, with_path, write_bytes};
use crate::error::{LiftError, Result};
use crate::image::{Image, LabelMap};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn skip_space_and_comments(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' && b[i] != b'\r' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn number(b: &[u8], i: usize, what: &str) -> std::result::Result<(u32, usize), String> {
    let start = skip_space_and_comments(b, i);
    let mut j = start;
    let mut v: u32 = 0;
    while j < b.len() && b[j].is_ascii_digit() {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add(u32::from(b[j] - b'0')))
            .ok_or_else(|| format!("{what} is too large"))?;
        j += 1;
    }
    if j == start {
        return Err(format!("missing {what} in header"));
    }
    Ok((v, j))
}

fn header(b: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if b.len() < 2 || &b[..2] != magic {
        return Err(format!(
            "not a {} file (bad magic)",
            std::str::from_utf8(magic).unwrap_or("netpbm")
        ));
    }
    let (width, i) = number(b, 2, "width")?;
    let (height, i) = number(b, i, "height")?;
    let (maxval, i) = number(b, i, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    if i >= b.len() || !b[i].is_ascii_whitespace() {
        return Err("header must end with a single whitespace byte".into());
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: i + 1,
    })
}

fn payload<'a>(b: &'a [u8], h: &Header, per_pixel: usize) -> std::result::Result<&'a [u8], String> {
    let expected = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(per_pixel))
        .ok_or("image dimensions overflow")?;
    let actual = b.len() - h.data_start;
    if actual != expected {
        return Err(format!(
            "{}x{} image needs {expected} data bytes, found {actual}",
            h.width, h.height
        ));
    }
    Ok(&b[h.data_start..])
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 3);
    for px in &img.data {
        out.extend_from_slice(px);
    }
    out
}

pub fn decode_ppm(b: &[u8]) -> std::result::Result<Image, String> {
    let h = header(b, b"P6")?;
    if h.maxval != 255 {
        return Err(format!("only 8-bit PPM is supported (maxval {})", h.maxval));
    }
    let data = payload(b, &h, 3)?;
    Ok(Image {
        width: h.width,
        height: h.height,
        data: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

/// 16-bit PGM; every value must fit in u16.
pub fn encode_pgm16(map: &LabelMap) -> Result<Vec<u8>> {
    if let Some(v) = map.data.iter().find(|&&v| v > 65535) {
        return Err(LiftError::Config(format!("label {v} does not fit a 16-bit PGM")));
    }
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(map.data.len() * 2);
    for &v in &map.data {
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok(out)
}

/// 8-bit PGM; every value must fit in u8.
pub fn encode_pgm8(map: &LabelMap) -> Result<Vec<u8>> {
    if let Some(v) = map.data.iter().find(|&&v| v > 255) {
        return Err(LiftError::Config(format!("label {v} does not fit an 8-bit PGM")));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.data.iter().map(|&v| v as u8));
    Ok(out)
}

/// Reads 8-bit (maxval < 256) or 16-bit big-endian PGM; values above maxval are rejected.
pub fn decode_pgm(b: &[u8]) -> std::result::Result<LabelMap, String> {
    let h = header(b, b"P5")?;
    let wide = h.maxval > 255;
    let data = payload(b, &h, if wide { 2 } else { 1 })?;
    let values: Vec<u32> = if wide {
        data.chunks_exact(2)
            .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        data.iter().map(|&v| u32::from(v)).collect()
    };
    if let Some(v) = values.iter().find(|&&v| v > h.maxval) {
        return Err(format!("value {v} exceeds maxval {}", h.maxval));
    }
    Ok(LabelMap {
        width: h.width,
        height: h.height,
        data: values,
    })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    with_path(path, decode_ppm(&read_bytes(path)?))
}

pub fn write_pgm16(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_pgm16(map)?)
}

pub fn write_pgm8(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_pgm8(map)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    with_path(path, decode_pgm(&read_bytes(path)?))
}
