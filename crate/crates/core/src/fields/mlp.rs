use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // softplus(z) = a  =>  sigmoid(z) = 1 - exp(-a)
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected perceptron; weights row-major `[out][in]` followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    offsets: Vec<usize>,
    num_params: usize,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    acts: Vec<f64>,
    starts: Vec<usize>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        let n = self.starts.len();
        &self.acts[self.starts[n - 1]..]
    }

    fn layer(&self, l: usize) -> &[f64] {
        let end = self
            .starts
            .get(l + 1)
            .copied()
            .unwrap_or(self.acts.len());
        &self.acts[self.starts[l]..end]
    }
}

impl Mlp {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        let mut offsets = Vec::with_capacity(dims.len() - 1);
        let mut n = 0;
        for w in dims.windows(2) {
            offsets.push(n);
            n += w[0] * w[1] + w[1];
        }
        Mlp {
            dims,
            activation,
            offsets,
            num_params: n,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Uniform fan-in initialization; the final layer is scaled by `final_scale`
    /// (0 gives an all-zero output layer). Biases start at zero.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R, final_scale: f64) {
        assert_eq!(params.len(), self.num_params);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / n_in as f64).sqrt() * if l == last { final_scale } else { 1.0 };
            let off = self.offsets[l];
            for w in &mut params[off..off + n_in * n_out] {
                *w = if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
            }
            params[off + n_in * n_out..off + n_in * n_out + n_out].fill(0.0);
        }
    }

    /// Forward pass recording activations; returns the (linear) output layer.
    pub fn forward<'t>(&self, params: &[f64], x: &[f64], trace: &'t mut MlpTrace) -> &'t [f64] {
        debug_assert_eq!(x.len(), self.dims[0]);
        trace.acts.clear();
        trace.starts.clear();
        trace.starts.push(0);
        trace.acts.extend_from_slice(x);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let in_start = trace.starts[l];
            let out_start = trace.acts.len();
            trace.starts.push(out_start);
            let off = self.offsets[l];
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let input = &trace.acts[in_start..in_start + n_in];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    s += wi * xi;
                }
                let a = if l == last { s } else { self.activation.apply(s) };
                trace.acts.push(a);
            }
        }
        trace.output()
    }

    /// Forward pass without recording; `scratch` is reused between calls.
    pub fn eval(&self, params: &[f64], x: &[f64], scratch: &mut MlpTrace) -> Vec<f64> {
        self.forward(params, x, scratch).to_vec()
    }

    /// Accumulates `grad_out^T d out / d params` into `grad` (this network's slice).
    /// When `grad_input` is given it receives `grad_out^T d out / d x`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        grad_out: &[f64],
        grad: &mut [f64],
        grad_input: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        debug_assert_eq!(grad_out.len(), self.output_dim());
        let max_w = *self.dims.iter().max().unwrap();
        scratch.clear();
        scratch.resize(2 * max_w, 0.0);
        let (delta, prev) = scratch.split_at_mut(max_w);
        delta[..grad_out.len()].copy_from_slice(grad_out);
        let mut grad_input = grad_input;
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = self.offsets[l];
            let input = trace.layer(l);
            let w = &params[off..off + n_in * n_out];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let need_input_grad = l > 0 || grad_input.is_some();
            let prev = &mut prev[..n_in];
            prev.fill(0.0);
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, xi) in grow.iter_mut().zip(input) {
                    *g += d * xi;
                }
                if need_input_grad {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
            }
            if l > 0 {
                for (i, p) in prev.iter().enumerate() {
                    delta[i] = p * self.activation.derivative_from_output(input[i]);
                }
            } else if let Some(gi) = grad_input.take() {
                gi.copy_from_slice(prev);
            }
        }
    }
}
