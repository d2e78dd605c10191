//! Parameter checkpoints: `LIFTCKPT`, u32 version, u32 slice count, then per
//! slice a u32 name length, the UTF-8 name, a u64 element count and that many
//! f32 values (all little-endian). The field configuration that fixes the
//! layout lives next to it in `<checkpoint>.config.json`.

use std::path::{Path, PathBuf};

use super::{read_bytes, read_json, with_path, write_bytes, write_json};
use crate::error::{LiftError, Result};
use crate::fields::{FieldConfig, Fields, ParamStore, SliceName};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub slices: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    /// Parameters rounded to f32.
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            slices: store
                .slices()
                .iter()
                .map(|s| {
                    let v = store.values()[s.range.clone()].iter().map(|&x| x as f32).collect();
                    (s.name.as_str().to_string(), v)
                })
                .collect(),
        }
    }

    /// Copies the values into `store`, whose layout must match exactly.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let expected: Vec<(SliceName, usize)> =
            store.slices().iter().map(|s| (s.name, s.range.len())).collect();
        if expected.len() != self.slices.len() {
            return Err(LiftError::Config(format!(
                "checkpoint has {} slices, the field expects {}",
                self.slices.len(),
                expected.len()
            )));
        }
        for ((name, len), (cname, values)) in expected.iter().zip(&self.slices) {
            if name.as_str() != cname || *len != values.len() {
                return Err(LiftError::Config(format!(
                    "checkpoint slice `{cname}` ({} values) does not match `{}` ({len} values)",
                    values.len(),
                    name.as_str()
                )));
            }
            for (d, &s) in store.slice_mut(*name).iter_mut().zip(values) {
                *d = f64::from(s);
            }
        }
        Ok(())
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.slices.len() as u32).to_le_bytes());
    for (name, values) in &c.slices {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, file has {}",
                self.at,
                self.b.len()
            )
        })?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        let s = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(s);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn decode_checkpoint(b: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut c = Cursor { b, at: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        ));
    }
    let count = c.u32("slice count")?;
    let mut slices = Vec::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "slice name")?)
            .map_err(|_| "slice name is not UTF-8".to_string())?
            .to_string();
        let n = c.u64("element count")?;
        let bytes = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format!("slice `{name}` is too large"))?;
        let raw = c.take(bytes, "slice values")?;
        let values = raw
            .chunks_exact(4)
            .map(|v| f32::from_le_bytes([v[0], v[1], v[2], v[3]]))
            .collect();
        slices.push((name, values));
    }
    if c.at != b.len() {
        return Err(format!("{} trailing bytes after the last slice", b.len() - c.at));
    }
    Ok(Checkpoint { slices })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(c))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    with_path(path, decode_checkpoint(&read_bytes(path)?))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its field-configuration sidecar.
pub fn save_checkpoint(path: &Path, fields: &Fields, store: &ParamStore) -> Result<()> {
    write_checkpoint(path, &Checkpoint::from_store(store))?;
    write_json(&sidecar(path), fields.config())
}

pub fn load_checkpoint(path: &Path) -> Result<(Fields, ParamStore)> {
    let config: FieldConfig = read_json(&sidecar(path))?;
    let fields = Fields::new(config)?;
    let mut store = fields.empty_store();
    read_checkpoint(path)?
        .apply(&mut store)
        .map_err(|e| LiftError::format(path, e.to_string()))?;
    Ok((fields, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_version_and_trailing_bytes() {
        let c = Checkpoint {
            slices: vec![("a".into(), vec![1.0, -2.5])],
        };
        let mut b = encode_checkpoint(&c);
        assert_eq!(decode_checkpoint(&b).unwrap(), c);
        b.push(0);
        assert!(decode_checkpoint(&b).unwrap_err().contains("trailing"));
        let mut b = encode_checkpoint(&c);
        b[8] = 2;
        assert!(decode_checkpoint(&b).unwrap_err().contains("version 2"));
        let b = encode_checkpoint(&c);
        assert!(decode_checkpoint(&b[..b.len() - 1]).unwrap_err().contains("truncated"));
    }
}
