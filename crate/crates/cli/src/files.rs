//! Label directories (`instance/`, `semantic/`, `rgb/` with NNNN-numbered
//! frames) and cleanup of partial outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lift_core::image::{Image, LabelMap};
use lift_core::io::{self, frame_name};

/// Paths a command creates; removed again if it fails.
#[derive(Default)]
pub struct Outputs(Vec<PathBuf>);

impl Outputs {
    pub fn claim(&mut self, p: &Path) {
        if !p.exists() {
            self.0.push(p.to_path_buf());
        }
    }

    pub fn remove(&self) {
        for p in self.0.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn write_frame(
    out: &mut Outputs,
    root: &Path,
    i: usize,
    instance: &LabelMap,
    semantic: Option<&LabelMap>,
    rgb: Option<&Image>,
) -> Result<()> {
    let p = root.join("instance").join(frame_name(i, "pgm"));
    out.claim(&p);
    io::write_pgm16(&p, instance)?;
    if let Some(s) = semantic {
        let p = root.join("semantic").join(frame_name(i, "pgm"));
        out.claim(&p);
        io::write_pgm8(&p, s)?;
    }
    if let Some(img) = rgb {
        let p = root.join("rgb").join(frame_name(i, "ppm"));
        out.claim(&p);
        io::write_ppm(&p, img)?;
    }
    Ok(())
}

/// Number of dense NNNN.ext frames in `dir`, or None if it does not exist.
fn frame_count(dir: &Path, ext: &str) -> Result<Option<usize>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let suffix = format!(".{ext}");
    let mut n = 0;
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = e?.file_name();
        if name.to_string_lossy().ends_with(&suffix) {
            n += 1;
        }
    }
    if let Some(i) = (0..n).find(|&i| !dir.join(frame_name(i, ext)).is_file()) {
        bail!("{} holds {n} frames but {} is missing", dir.display(), frame_name(i, ext));
    }
    Ok(Some(n))
}

pub fn read_maps(root: &Path, sub: &str) -> Result<Option<Vec<LabelMap>>> {
    let dir = root.join(sub);
    let Some(n) = frame_count(&dir, "pgm")? else {
        return Ok(None);
    };
    let maps = (0..n)
        .map(|i| io::read_pgm(&dir.join(frame_name(i, "pgm"))))
        .collect::<lift_core::Result<Vec<_>>>()?;
    Ok(Some(maps))
}

/// Maps from the first of `subs` present under `root`.
pub fn read_first(root: &Path, subs: &[&str]) -> Result<Option<Vec<LabelMap>>> {
    for s in subs {
        if let Some(m) = read_maps(root, s)? {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

pub fn read_images(root: &Path) -> Result<Option<Vec<Image>>> {
    let dir = root.join("rgb");
    let Some(n) = frame_count(&dir, "ppm")? else {
        return Ok(None);
    };
    let imgs = (0..n)
        .map(|i| io::read_ppm(&dir.join(frame_name(i, "ppm"))))
        .collect::<lift_core::Result<Vec<_>>>()?;
    Ok(Some(imgs))
}

pub fn csv_writer(out: &mut Outputs, path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.claim(path);
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}
