//! Neural fields over a bounded box: density grid, color grid + perceptron,
//! fast/slow instance embedding perceptrons and the semantic perceptron, all
//! reading their weights from one [`ParamStore`].
//!
//! Every traced forward has a matching backward that accumulates exact
//! gradients into a buffer aligned with the store.

mod encoding;
mod grid;
mod mlp;
mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoding::{encoded_len, freq_encode};
pub use grid::{Corners, Grid};
pub use mlp::{sigmoid, softplus, Activation, Mlp, MlpTrace};
pub use store::{ParamSlice, ParamStore, SliceName};

use crate::error::{LiftError, Result};
use crate::geometry::{norm, scale, Aabb, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub bounds: Aabb,
    /// Vertices per axis of the density and color grids.
    pub grid_res: [usize; 3],
    /// density = scale * softplus(interpolated raw value)
    pub density_scale: f64,
    /// Initial raw density value at every vertex.
    pub density_init: f64,
    pub color_channels: usize,
    /// Frequency-encoding order of the viewing direction.
    pub dir_freqs: usize,
    pub color_hidden: usize,
    pub embed_dim: usize,
    pub instance_hidden: usize,
    pub instance_layers: usize,
    pub num_classes: usize,
    pub semantic_hidden: usize,
    pub semantic_layers: usize,
    pub activation: Activation,
    /// Scale of the instance perceptron's output layer at init (0 = all zeros).
    pub instance_final_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            bounds: Aabb::cube(1.0),
            grid_res: [32, 32, 32],
            density_scale: 25.0,
            density_init: -4.0,
            color_channels: 8,
            dir_freqs: 4,
            color_hidden: 32,
            embed_dim: 3,
            instance_hidden: 64,
            instance_layers: 5,
            num_classes: 2,
            semantic_hidden: 32,
            semantic_layers: 5,
            activation: Activation::Relu,
            instance_final_scale: 1.0,
        }
    }
}

impl FieldConfig {
    /// Default config over `bounds` with roughly cubic voxels of edge `voxel`.
    pub fn for_bounds(bounds: Aabb, voxel: f64) -> Self {
        let e = bounds.extent();
        let res = |k: usize| ((e[k] / voxel).ceil() as usize + 1).max(2);
        FieldConfig {
            bounds,
            grid_res: [res(0), res(1), res(2)],
            ..FieldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LiftError::Config(m.to_string()));
        if (0..3).any(|k| self.bounds.max[k] <= self.bounds.min[k]) {
            return bad("field bounds must have positive extent");
        }
        if self.grid_res.iter().any(|&r| r < 2) {
            return bad("grid_res needs at least 2 vertices per axis");
        }
        if self.embed_dim == 0 || self.num_classes == 0 || self.color_channels == 0 {
            return bad("embed_dim, num_classes and color_channels must be positive");
        }
        if self.instance_layers == 0 || self.semantic_layers == 0 {
            return bad("perceptrons need at least one layer");
        }
        if !(self.density_scale > 0.0) {
            return bad("density_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fast,
    Slow,
}

impl Branch {
    pub fn slice(self) -> SliceName {
        match self {
            Branch::Fast => SliceName::InstanceFast,
            Branch::Slow => SliceName::InstanceSlow,
        }
    }
}

/// Density at one point together with what its backward pass needs.
#[derive(Debug, Clone, Copy)]
pub struct DensitySample {
    pub sigma: f64,
    /// d sigma / d raw
    pub dsigma: f64,
    pub corners: Option<Corners>,
}

#[derive(Debug, Clone, Default)]
pub struct ColorTrace {
    corners: Option<Corners>,
    input: Vec<f64>,
    mlp: MlpTrace,
    rgb: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct SemanticTrace {
    mlp: MlpTrace,
    probs: Vec<f64>,
}

impl SemanticTrace {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Layout and evaluation of the complete field set. Parameters live in a
/// separate [`ParamStore`] so evaluation is pure and shareable across threads.
#[derive(Debug, Clone)]
pub struct Fields {
    config: FieldConfig,
    pub density: Grid,
    pub color_grid: Grid,
    pub color_mlp: Mlp,
    pub instance: Mlp,
    pub semantic: Mlp,
}

fn perceptron(n_in: usize, hidden: usize, layers: usize, n_out: usize, act: Activation) -> Mlp {
    let mut dims = vec![n_in];
    dims.extend(std::iter::repeat_n(hidden, layers - 1));
    dims.push(n_out);
    Mlp::new(dims, act)
}

impl Fields {
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let density = Grid::new(config.bounds, config.grid_res, 1);
        let color_grid = Grid::new(config.bounds, config.grid_res, config.color_channels);
        let color_mlp = perceptron(
            config.color_channels + encoded_len(config.dir_freqs),
            config.color_hidden,
            3,
            3,
            config.activation,
        );
        let instance = perceptron(
            3,
            config.instance_hidden,
            config.instance_layers,
            config.embed_dim,
            config.activation,
        );
        let semantic = perceptron(
            3,
            config.semantic_hidden,
            config.semantic_layers,
            config.num_classes,
            config.activation,
        );
        Ok(Fields {
            config,
            density,
            color_grid,
            color_mlp,
            instance,
            semantic,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Aabb {
        &self.config.bounds
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layout(&self) -> Vec<(SliceName, usize)> {
        vec![
            (SliceName::DensityGrid, self.density.len()),
            (SliceName::ColorGrid, self.color_grid.len()),
            (SliceName::ColorMlp, self.color_mlp.num_params()),
            (SliceName::InstanceFast, self.instance.num_params()),
            (SliceName::InstanceSlow, self.instance.num_params()),
            (SliceName::Semantic, self.semantic.num_params()),
        ]
    }

    pub fn empty_store(&self) -> ParamStore {
        ParamStore::with_layout(&self.layout())
    }

    /// Freshly initialized parameters; the slow field starts as a copy of the fast one.
    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = self.empty_store();
        store
            .slice_mut(SliceName::DensityGrid)
            .fill(self.config.density_init);
        for v in store.slice_mut(SliceName::ColorGrid) {
            *v = rng.random_range(-0.1..0.1);
        }
        self.color_mlp
            .init(store.slice_mut(SliceName::ColorMlp), &mut rng, 0.0);
        self.instance.init(
            store.slice_mut(SliceName::InstanceFast),
            &mut rng,
            self.config.instance_final_scale,
        );
        self.semantic
            .init(store.slice_mut(SliceName::Semantic), &mut rng, 0.0);
        store
            .copy_slice(SliceName::InstanceFast, SliceName::InstanceSlow)
            .expect("fast and slow share a layout");
        store
    }

    /// Coordinates fed to the instance and semantic perceptrons: the raw
    /// position expressed in the field box's [-1, 1] frame.
    #[inline]
    pub fn mlp_coords(&self, x: Vec3) -> Vec3 {
        self.config.bounds.to_unit(x)
    }

    pub fn density_sample(&self, store: &ParamStore, x: Vec3) -> DensitySample {
        match self.density.corners(x) {
            None => DensitySample {
                sigma: 0.0,
                dsigma: 0.0,
                corners: None,
            },
            Some(c) => {
                let mut raw = [0.0];
                self.density
                    .interpolate(store.slice(SliceName::DensityGrid), &c, &mut raw);
                let s = self.config.density_scale;
                DensitySample {
                    sigma: s * softplus(raw[0]),
                    dsigma: s * sigmoid(raw[0]),
                    corners: Some(c),
                }
            }
        }
    }

    pub fn eval_density(&self, store: &ParamStore, x: Vec3) -> f64 {
        self.density_sample(store, x).sigma
    }

    /// Color at `x` seen along `d`. A non-unit `d` is normalized and the
    /// returned flag is set.
    pub fn eval_color(&self, store: &ParamStore, x: Vec3, d: Vec3) -> (Vec3, bool) {
        let n = norm(d);
        let renormalized = (n - 1.0).abs() > 1e-9;
        let d = if renormalized && n > 0.0 { scale(d, 1.0 / n) } else { d };
        let mut enc = Vec::new();
        freq_encode(d, self.config.dir_freqs, &mut enc);
        let mut trace = ColorTrace::default();
        (self.color_forward(store, x, &enc, &mut trace), renormalized)
    }

    pub fn color_forward(
        &self,
        store: &ParamStore,
        x: Vec3,
        encoded_dir: &[f64],
        trace: &mut ColorTrace,
    ) -> Vec3 {
        let ch = self.config.color_channels;
        trace.corners = self.color_grid.corners(x);
        trace.input.clear();
        trace.input.resize(ch, 0.0);
        if let Some(c) = &trace.corners {
            self.color_grid
                .interpolate(store.slice(SliceName::ColorGrid), c, &mut trace.input);
        }
        trace.input.extend_from_slice(encoded_dir);
        let out = self
            .color_mlp
            .forward(store.slice(SliceName::ColorMlp), &trace.input, &mut trace.mlp);
        trace.rgb = [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])];
        trace.rgb
    }

    pub fn color_backward(
        &self,
        store: &ParamStore,
        trace: &ColorTrace,
        grad_rgb: Vec3,
        grad: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let g_logits: Vec<f64> = (0..3)
            .map(|k| grad_rgb[k] * trace.rgb[k] * (1.0 - trace.rgb[k]))
            .collect();
        let ch = self.config.color_channels;
        let mut g_in = vec![0.0; trace.input.len()];
        let mlp_range = store.range(SliceName::ColorMlp);
        self.color_mlp.backward(
            store.slice(SliceName::ColorMlp),
            &trace.mlp,
            &g_logits,
            &mut grad[mlp_range],
            trace.corners.is_some().then_some(&mut g_in[..]),
            scratch,
        );
        if let Some(c) = &trace.corners {
            let r = store.range(SliceName::ColorGrid);
            self.color_grid.scatter(c, &g_in[..ch], &mut grad[r]);
        }
    }

    pub fn eval_instance(&self, store: &ParamStore, branch: Branch, x: Vec3) -> Vec<f64> {
        let mut trace = MlpTrace::default();
        self.instance_forward(store, branch, x, &mut trace).to_vec()
    }

    pub fn instance_forward<'t>(
        &self,
        store: &ParamStore,
        branch: Branch,
        x: Vec3,
        trace: &'t mut MlpTrace,
    ) -> &'t [f64] {
        let p = self.mlp_coords(x);
        self.instance
            .forward(store.slice(branch.slice()), &p, trace)
    }

    /// Backward through the fast instance perceptron only; the slow branch
    /// never receives gradients.
    pub fn instance_backward(
        &self,
        store: &ParamStore,
        trace: &MlpTrace,
        grad_out: &[f64],
        grad: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let r = store.range(SliceName::InstanceFast);
        self.instance.backward(
            store.slice(SliceName::InstanceFast),
            trace,
            grad_out,
            &mut grad[r],
            None,
            scratch,
        );
    }

    /// Class distribution (softmax of the semantic logits) at `x`.
    pub fn eval_semantic(&self, store: &ParamStore, x: Vec3) -> Vec<f64> {
        let mut trace = SemanticTrace::default();
        self.semantic_forward(store, x, &mut trace).to_vec()
    }

    pub fn semantic_forward<'t>(
        &self,
        store: &ParamStore,
        x: Vec3,
        trace: &'t mut SemanticTrace,
    ) -> &'t [f64] {
        let p = self.mlp_coords(x);
        let logits = self
            .semantic
            .forward(store.slice(SliceName::Semantic), &p, &mut trace.mlp);
        softmax_into(logits, &mut trace.probs);
        &trace.probs
    }

    pub fn semantic_backward(
        &self,
        store: &ParamStore,
        trace: &SemanticTrace,
        grad_probs: &[f64],
        grad: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let g_logits = softmax_backward(&trace.probs, grad_probs);
        let r = store.range(SliceName::Semantic);
        self.semantic.backward(
            store.slice(SliceName::Semantic),
            &trace.mlp,
            &g_logits,
            &mut grad[r],
            None,
            scratch,
        );
    }

    /// Resamples both grids to `res`, returning the new layout and a store
    /// with every other slice copied over unchanged.
    pub fn upsample(&self, store: &ParamStore, res: [usize; 3]) -> Result<(Fields, ParamStore)> {
        let mut config = self.config.clone();
        config.grid_res = res;
        let fields = Fields::new(config)?;
        let mut out = fields.empty_store();
        let (_, d) = self
            .density
            .resample(store.slice(SliceName::DensityGrid), res);
        let (_, c) = self
            .color_grid
            .resample(store.slice(SliceName::ColorGrid), res);
        out.slice_mut(SliceName::DensityGrid).copy_from_slice(&d);
        out.slice_mut(SliceName::ColorGrid).copy_from_slice(&c);
        for name in [
            SliceName::ColorMlp,
            SliceName::InstanceFast,
            SliceName::InstanceSlow,
            SliceName::Semantic,
        ] {
            out.slice_mut(name).copy_from_slice(store.slice(name));
        }
        Ok((fields, out))
    }
}

pub fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|z| (z - m).exp()));
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
}

/// Vector-Jacobian product of softmax: `p * (g - <p, g>)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dotp: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dotp))
        .collect()
}
