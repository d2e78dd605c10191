//! Flat JSON run configuration. Each key belongs to the training, field or
//! labelling settings; a key shared by several (only `seed`) sets all of them.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lift_core::fields::FieldConfig;
use lift_core::geometry::Aabb;
use lift_core::pipeline::LabelConfig;
use lift_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Grid spacing used to size the density and color grids from the scene box.
pub const DEFAULT_VOXEL: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub field: FieldConfig,
    pub label: LabelConfig,
    pub voxel: f64,
    /// The file pinned `bounds` or `grid_res`, so the scene box is ignored.
    pub explicit_grid: bool,
}

impl Default for RunConfig {
    /// Library defaults, except for the settings that make the geometry phase
    /// converge in a few thousand steps on one core.
    fn default() -> Self {
        RunConfig {
            train: TrainConfig {
                lr_grid: 0.05,
                freeze_geometry: true,
                ..TrainConfig::default()
            },
            field: FieldConfig {
                density_init: -3.0,
                color_hidden: 16,
                ..FieldConfig::default()
            },
            label: LabelConfig::default(),
            voxel: DEFAULT_VOXEL,
            explicit_grid: false,
        }
    }
}

fn as_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn merge<T: Serialize + DeserializeOwned>(base: &T, over: &Map<String, Value>, what: &str) -> Result<T> {
    let mut m = as_object(base);
    for (k, v) in over {
        if m.contains_key(k) {
            m.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(m)).with_context(|| format!("invalid {what} setting"))
}

impl RunConfig {
    /// Every key a config file may use.
    pub fn keys() -> BTreeSet<String> {
        let d = RunConfig::default();
        let mut keys: BTreeSet<String> = as_object(&d.train).into_iter().map(|(k, _)| k).collect();
        keys.extend(as_object(&d.field).into_iter().map(|(k, _)| k));
        keys.extend(as_object(&d.label).into_iter().map(|(k, _)| k));
        keys.insert("voxel".into());
        keys
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let Value::Object(over) = v else {
            bail!("config must be a JSON object");
        };
        let known = Self::keys();
        if let Some(k) = over.keys().find(|k| !known.contains(*k)) {
            bail!("unknown config key `{k}`");
        }
        let d = RunConfig::default();
        let voxel = match over.get("voxel") {
            None => d.voxel,
            Some(v) => v.as_f64().filter(|x| *x > 0.0).context("`voxel` must be a positive number")?,
        };
        Ok(RunConfig {
            train: merge(&d.train, &over, "training")?,
            field: merge(&d.field, &over, "field")?,
            label: merge(&d.label, &over, "labelling")?,
            voxel,
            explicit_grid: over.contains_key("bounds") || over.contains_key("grid_res"),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Self::from_value(v).with_context(|| format!("in {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.label.seed = seed;
    }

    /// Field layout for a scene box, unless the file fixed the grid.
    pub fn field_for(&self, bounds: Option<Aabb>) -> Result<FieldConfig> {
        if self.explicit_grid {
            return Ok(self.field.clone());
        }
        let Some(b) = bounds else {
            bail!("dataset has no scene.json; set `bounds` and `grid_res` in the config");
        };
        let sized = FieldConfig::for_bounds(b, self.voxel);
        Ok(FieldConfig {
            bounds: sized.bounds,
            grid_res: sized.grid_res,
            ..self.field.clone()
        })
    }
}
