//! Dataset directories:
//!
//! ```text
//! cameras.json            list of cameras
//! scene.json              generating scene (optional)
//! rgb/NNNN.ppm            P6
//! instance_gt/NNNN.pgm    P5, 16-bit
//! instance_noisy/NNNN.pgm P5, 16-bit
//! semantic/NNNN.pgm       P5, 8-bit
//! depth/NNNN.f32          DEPTHF32
//! ```
//!
//! Only `cameras.json` and `rgb/` are required; the other maps are read on
//! demand and may be absent.

use std::path::{Path, PathBuf};

use super::{read_depth, read_json, read_pgm, read_ppm, write_depth, write_json, write_pgm16, write_pgm8, write_ppm};
use crate::error::{LiftError, Result};
use crate::image::{DepthMap, Image, LabelMap};
use crate::rendering::Camera;
use crate::scenegen::Scene;

pub fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

/// Everything stored for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub rgb: Image,
    pub instance_gt: Option<LabelMap>,
    pub instance_noisy: Option<LabelMap>,
    pub semantic: Option<LabelMap>,
    pub depth: Option<DepthMap>,
}

/// Handle on a dataset directory; maps are loaded lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub scene: Option<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    fn path(&self, dir: &str, i: usize, ext: &str) -> PathBuf {
        self.root.join(dir).join(frame_name(i, ext))
    }

    fn check_size(&self, i: usize, path: &Path, w: usize, h: usize) -> Result<()> {
        let c = &self.cameras[i];
        if (w, h) != (c.width, c.height) {
            return Err(LiftError::format(
                path,
                format!("{w}x{h} map for a {}x{} camera", c.width, c.height),
            ));
        }
        Ok(())
    }

    fn label_map(&self, dir: &str, i: usize) -> Result<LabelMap> {
        let p = self.path(dir, i, "pgm");
        let m = read_pgm(&p)?;
        self.check_size(i, &p, m.width, m.height)?;
        Ok(m)
    }

    pub fn has(&self, dir: &str) -> bool {
        self.root.join(dir).is_dir()
    }

    pub fn rgb(&self, i: usize) -> Result<Image> {
        let p = self.path("rgb", i, "ppm");
        let m = read_ppm(&p)?;
        self.check_size(i, &p, m.width, m.height)?;
        Ok(m)
    }

    pub fn instance_gt(&self, i: usize) -> Result<LabelMap> {
        self.label_map("instance_gt", i)
    }

    pub fn instance_noisy(&self, i: usize) -> Result<LabelMap> {
        self.label_map("instance_noisy", i)
    }

    pub fn semantic(&self, i: usize) -> Result<LabelMap> {
        self.label_map("semantic", i)
    }

    pub fn depth(&self, i: usize) -> Result<DepthMap> {
        let p = self.path("depth", i, "f32");
        let m = read_depth(&p)?;
        self.check_size(i, &p, m.width, m.height)?;
        Ok(m)
    }

    /// Loads one map kind for every frame.
    pub fn all<T>(&self, f: impl Fn(&Self, usize) -> Result<T>) -> Result<Vec<T>> {
        (0..self.len()).map(|i| f(self, i)).collect()
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let cameras: Vec<Camera> = read_json(&root.join("cameras.json"))?;
    for c in &cameras {
        c.validate()
            .map_err(|e| LiftError::format(root.join("cameras.json"), e.to_string()))?;
    }
    let scene_path = root.join("scene.json");
    let scene = if scene_path.exists() {
        Some(read_json(&scene_path)?)
    } else {
        None
    };
    let ds = Dataset {
        root: root.to_path_buf(),
        cameras,
        scene,
    };
    for i in 0..ds.len() {
        let p = ds.path("rgb", i, "ppm");
        if !p.is_file() {
            return Err(LiftError::format(root, format!("missing frame {}", p.display())));
        }
    }
    Ok(ds)
}

pub fn save_dataset(root: &Path, cameras: &[Camera], scene: Option<&Scene>, frames: &[DatasetFrame]) -> Result<Dataset> {
    if cameras.len() != frames.len() {
        return Err(LiftError::LengthMismatch {
            expected: cameras.len(),
            actual: frames.len(),
        });
    }
    write_json(&root.join("cameras.json"), cameras)?;
    if let Some(s) = scene {
        write_json(&root.join("scene.json"), s)?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&root.join("rgb").join(frame_name(i, "ppm")), &f.rgb)?;
        if let Some(m) = &f.instance_gt {
            write_pgm16(&root.join("instance_gt").join(frame_name(i, "pgm")), m)?;
        }
        if let Some(m) = &f.instance_noisy {
            write_pgm16(&root.join("instance_noisy").join(frame_name(i, "pgm")), m)?;
        }
        if let Some(m) = &f.semantic {
            write_pgm8(&root.join("semantic").join(frame_name(i, "pgm")), m)?;
        }
        if let Some(d) = &f.depth {
            write_depth(&root.join("depth").join(frame_name(i, "f32")), d)?;
        }
    }
    load_dataset(root)
}
