use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};

/// Named parameter groups. Every parameter in a [`ParamStore`] belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SliceName {
    DensityGrid,
    ColorGrid,
    ColorMlp,
    InstanceFast,
    InstanceSlow,
    Semantic,
}

impl SliceName {
    pub const ALL: [SliceName; 6] = [
        SliceName::DensityGrid,
        SliceName::ColorGrid,
        SliceName::ColorMlp,
        SliceName::InstanceFast,
        SliceName::InstanceSlow,
        SliceName::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SliceName::DensityGrid => "density-grid",
            SliceName::ColorGrid => "color-grid",
            SliceName::ColorMlp => "color-mlp",
            SliceName::InstanceFast => "instance-fast-mlp",
            SliceName::InstanceSlow => "instance-slow-mlp",
            SliceName::Semantic => "semantic-mlp",
        }
    }

    pub fn parse(name: &str) -> Option<SliceName> {
        SliceName::ALL.into_iter().find(|s| s.as_str() == name)
    }

    pub fn is_grid(self) -> bool {
        matches!(self, SliceName::DensityGrid | SliceName::ColorGrid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlice {
    pub name: SliceName,
    pub range: Range<usize>,
    pub trainable: bool,
}

/// Flat parameter vector partitioned into named slices.
///
/// The slow instance slice is never trainable; it only moves through
/// [`crate::training::ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamStore {
    /// Builds a zeroed store from `(name, len)` pairs laid out in order.
    pub fn with_layout(layout: &[(SliceName, usize)]) -> Self {
        let mut slices = Vec::with_capacity(layout.len());
        let mut start = 0;
        for &(name, len) in layout {
            assert!(
                slices.iter().all(|s: &ParamSlice| s.name != name),
                "duplicate slice {}",
                name.as_str()
            );
            slices.push(ParamSlice {
                name,
                range: start..start + len,
                trainable: name != SliceName::InstanceSlow,
            });
            start += len;
        }
        ParamStore {
            values: vec![0.0; start],
            slices,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    fn find(&self, name: SliceName) -> &ParamSlice {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("store has no slice {}", name.as_str()))
    }

    pub fn range(&self, name: SliceName) -> Range<usize> {
        self.find(name).range.clone()
    }

    pub fn slice(&self, name: SliceName) -> &[f64] {
        &self.values[self.range(name)]
    }

    pub fn slice_mut(&mut self, name: SliceName) -> &mut [f64] {
        let r = self.range(name);
        &mut self.values[r]
    }

    pub fn is_trainable(&self, name: SliceName) -> bool {
        self.find(name).trainable
    }

    /// Marks a slice as (not) trainable. The slow instance slice stays frozen.
    pub fn set_trainable(&mut self, name: SliceName, trainable: bool) {
        let slice = self
            .slices
            .iter_mut()
            .find(|s| s.name == name)
            .expect("unknown slice");
        slice.trainable = trainable && name != SliceName::InstanceSlow;
    }

    /// Slice that owns parameter `index`.
    pub fn owner(&self, index: usize) -> SliceName {
        self.slices
            .iter()
            .find(|s| s.range.contains(&index))
            .map(|s| s.name)
            .expect("index out of range")
    }

    /// Copies one slice into another of equal length.
    pub fn copy_slice(&mut self, from: SliceName, to: SliceName) -> Result<()> {
        let src = self.range(from);
        let dst = self.range(to);
        if src.len() != dst.len() {
            return Err(LiftError::LengthMismatch {
                expected: dst.len(),
                actual: src.len(),
            });
        }
        self.values.copy_within(src, dst.start);
        Ok(())
    }

    /// Zero gradient aligned with this store.
    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Rejects gradients containing NaN or infinities, naming the offending slice.
    pub fn check_gradient(&self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(LiftError::LengthMismatch {
                expected: self.values.len(),
                actual: grad.len(),
            });
        }
        for s in &self.slices {
            if grad[s.range.clone()].iter().any(|g| !g.is_finite()) {
                return Err(LiftError::NonFiniteGradient {
                    slice: s.name.as_str(),
                });
            }
        }
        Ok(())
    }
}
