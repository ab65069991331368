//! Parameterized building blocks shared by the model stages.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, join, trunc_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `k×k` convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-initialized kernel scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add(
            join(name, "weight"),
            he_normal(&[k, k, c_in, c_out], k * k * c_in, gain, rng),
        );
        let bias = params.add(join(name, "bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = params.var(g, self.weight);
        let b = params.var(g, self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.add(y, b)
    }

    pub fn out_channels(&self, params: &ParamStore) -> usize {
        params.get(self.weight).shape()[3]
    }
}

/// Fully connected layer over the last axis, `weight: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Truncated-normal weights with σ = 1/√d_in, zero bias.
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / libm::sqrt(d_in as f64);
        let weight = params.add(join(name, "weight"), trunc_normal(&[d_in, d_out], std, rng));
        let bias = with_bias.then(|| params.add(join(name, "bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    /// A bias-free projection stored under exactly `name`.
    pub fn bare(params: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let weight = params.add(name, trunc_normal(&[d_in, d_out], 1.0 / libm::sqrt(d_in as f64), rng));
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let w = params.var(g, self.weight);
        let (d_in, d_out) = {
            let s = g.shape(w);
            (s[0], s[1])
        };
        if shape.last() != Some(&d_in) {
            return Err(Error::shape("linear", &shape, g.shape(w)));
        }
        let rows = shape.iter().product::<usize>() / d_in;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, d_in])? };
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = params.var(g, b);
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape: Vec<usize> = shape;
        *out_shape.last_mut().unwrap() = d_out;
        g.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(join(name, "gain"), Tensor::ones(&[dim])),
            bias: params.add(join(name, "bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let gain = params.var(g, self.gain);
        let bias = params.var(g, self.bias);
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, gain, bias, axis)
    }
}
