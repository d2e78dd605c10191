//! In-memory image types shared by the generator, metrics and io.

use crate::error::{LiftError, Result};

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    pub fn from_f64(width: usize, height: usize, rgb: &[[f64; 3]]) -> Self {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Image {
            width,
            height,
            data: rgb.iter().map(|c| [q(c[0]), q(c[1]), q(c[2])]).collect(),
        }
    }

    pub fn pixel_f64(&self, i: usize) -> [f64; 3] {
        let p = self.data[i];
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }
}

/// Per-pixel integer labels: instance IDs (0 = background/void) or semantic classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(LiftError::LengthMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Distinct nonzero labels in ascending order.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Per-pixel hit distance along the pixel ray; `f32::INFINITY` where nothing is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}
