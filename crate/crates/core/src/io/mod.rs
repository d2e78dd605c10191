//! On-disk formats. Every decoder works on bytes, rejects malformed input with
//! an error and never panics; the path-based helpers add file context.

mod checkpoint;
mod dataset;
mod depth;
mod netpbm;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{frame_name, load_dataset, save_dataset, Dataset, DatasetFrame};
pub use depth::{decode_depth, encode_depth, read_depth, write_depth, DEPTH_MAGIC};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm16, encode_pgm8, encode_ppm, read_pgm, read_ppm, write_pgm16,
    write_pgm8, write_ppm,
};

use crate::error::{LiftError, Result};
use crate::training::LogRow;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LiftError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LiftError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| LiftError::io(path, e))
}

/// Attaches `path` to a decoding error.
pub(crate) fn with_path<T>(path: &Path, r: std::result::Result<T, String>) -> Result<T> {
    r.map_err(|m| LiftError::format(path, m))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| LiftError::format(path, e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn encode_log(rows: &[LogRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(LogRow::HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| LiftError::Config(e.to_string()))
}

pub fn decode_log(bytes: &[u8]) -> std::result::Result<Vec<LogRow>, String> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(LogRow::HEADER) {
        return Err(format!("unexpected log header {:?}", header.iter().collect::<Vec<_>>()));
    }
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_bytes(path, &encode_log(rows)?)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    with_path(path, decode_log(&read_bytes(path)?))
}
