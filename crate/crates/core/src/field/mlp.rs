//! Dense multilayer perceptrons with a flat `f32` parameter store and `f64` evaluation.
//!
//! Every layer stores its weights row-major (`out x in`) followed by its bias, so the
//! whole network is a single contiguous block for the optimizer and the file formats.
//! Forward passes write a trace (layer inputs and pre-activations) into a caller-owned
//! buffer so that backward passes can run without reallocation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn is_piecewise(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::LeakyRelu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f32>,
}

impl Mlp {
    /// Zero-initialized network. `dims` lists every width from input to output.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "mlp needs one activation per layer, got dims {dims:?} and {} activations",
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("mlp widths must be positive: {dims:?}")));
        }
        let n = param_count(dims);
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Kaiming-style fan-in uniform weights, zero biases.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(dims, activations)?;
        for l in 0..mlp.num_layers() {
            let fan_in = mlp.dims[l] as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            let (w, _) = mlp.layer_ranges(l);
            for v in &mut mlp.params[w] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn from_params(dims: &[usize], activations: &[Activation], params: Vec<f32>) -> Result<Self> {
        let mut mlp = Self::zeros(dims, activations)?;
        if params.len() != mlp.params.len() {
            return Err(Error::DimMismatch {
                what: "mlp parameters",
                expected: mlp.params.len(),
                got: params.len(),
            });
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("mlp has at least two dims")
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Parameter ranges `(weights, bias)` of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        let nw = self.dims[l] * self.dims[l + 1];
        (off..off + nw, off + nw..off + nw + self.dims[l + 1])
    }

    /// Length of the trace buffer a forward pass fills.
    pub fn trace_len(&self) -> usize {
        let mut n = 0;
        for l in 0..self.num_layers() {
            n += self.dims[l] + self.dims[l + 1];
        }
        n + self.output_dim()
    }

    /// Evaluates the network, recording layer inputs and pre-activations into `trace`.
    /// Returns the output slice, which lives at the tail of `trace`.
    pub fn forward_traced<'t>(&self, x: &[f64], trace: &'t mut [f64]) -> &'t [f64] {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(trace.len(), self.trace_len());
        let mut off = 0;
        trace[..x.len()].copy_from_slice(x);
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer_ranges(l);
            let (w, b) = (&self.params[w], &self.params[b]);
            let (head, tail) = trace.split_at_mut(off + n_in);
            let input = &head[off..];
            let (pre, next) = tail.split_at_mut(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o] as f64;
                for (wi, xi) in row.iter().zip(input) {
                    acc += *wi as f64 * xi;
                }
                pre[o] = acc;
            }
            let act = self.activations[l];
            for o in 0..n_out {
                next[o] = act.apply(pre[o]);
            }
            off += n_in + n_out;
        }
        &trace[off..off + self.output_dim()]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut trace = vec![0.0; self.trace_len()];
        self.forward_traced(x, &mut trace).to_vec()
    }

    /// Reverse pass for one traced evaluation. Parameter gradients are accumulated into
    /// `grad` when given; the input gradient is written (not accumulated) into `d_in`.
    pub fn backward(&self, trace: &[f64], d_out: &[f64], grad: Option<&mut [f64]>, d_in: &mut [f64]) {
        debug_assert_eq!(d_out.len(), self.output_dim());
        let mut grad = grad;
        let mut upstream: Vec<f64> = d_out.to_vec();
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for l in 0..self.num_layers() {
            offsets.push(off);
            off += self.dims[l] + self.dims[l + 1];
        }
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let input = &trace[offsets[l]..offsets[l] + n_in];
            let pre = &trace[offsets[l] + n_in..offsets[l] + n_in + n_out];
            let act = self.activations[l];
            let d_pre: Vec<f64> = (0..n_out).map(|o| upstream[o] * act.derivative(pre[o])).collect();
            let (wr, br) = self.layer_ranges(l);
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..n_out {
                    let dp = d_pre[o];
                    if dp == 0.0 {
                        continue;
                    }
                    let row = &mut g[wr.start + o * n_in..wr.start + (o + 1) * n_in];
                    for (gi, xi) in row.iter_mut().zip(input) {
                        *gi += dp * xi;
                    }
                    g[br.start + o] += dp;
                }
            }
            let w = &self.params[wr];
            let mut d_x = vec![0.0; n_in];
            for o in 0..n_out {
                let dp = d_pre[o];
                if dp == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (dx, wi) in d_x.iter_mut().zip(row) {
                    *dx += dp * *wi as f64;
                }
            }
            upstream = d_x;
        }
        d_in.copy_from_slice(&upstream);
    }

    /// Signs of every piecewise-linear pre-activation in a trace; two evaluations with
    /// equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self, trace: &[f64], out: &mut Vec<bool>) {
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            if self.activations[l].is_piecewise() {
                out.extend(trace[off + n_in..off + n_in + n_out].iter().map(|&p| p > 0.0));
            }
            off += n_in + n_out;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
