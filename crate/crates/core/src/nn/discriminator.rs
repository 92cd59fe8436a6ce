use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, instance_norm, leaky_relu};
use super::params::Params;
use super::INIT_STD;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 layers before the 1-channel scoring convolution.
    pub n_layers: usize,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            base_width,
            n_layers: 4,
        }
    }

    pub fn layer_width(&self, k: usize) -> usize {
        (self.base_width << k).min(self.base_width * 8)
    }

    pub fn stride(&self) -> usize {
        1 << self.n_layers
    }

    /// Score-map side length for an input side length.
    pub fn output_side(&self, side: usize) -> usize {
        (side / self.stride()).saturating_sub(1)
    }
}

/// Patch discriminator: 4×4 stride-2 convolutions with leaky ReLU (instance
/// norm on all but the first), then a 4×4 stride-1 convolution to one
/// channel. Emits a grid of unbounded realness scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: Params,
}

impl Discriminator {
    pub fn new<R: Rng>(config: DiscriminatorConfig, dtype: DType, device: &Device, rng: &mut R) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 || config.n_layers == 0 {
            return Err(Error::validation("discriminator config", "all sizes must be ≥ 1"));
        }
        let mut p = Params::new(dtype, device);
        let mut c_in = config.in_channels;
        for k in 0..config.n_layers {
            let c_out = config.layer_width(k);
            p.gaussian(&format!("conv{k}.weight"), &[c_out, c_in, 4, 4], INIT_STD, rng)?;
            p.zeros(&format!("conv{k}.bias"), &[c_out])?;
            c_in = c_out;
        }
        p.gaussian("score.weight", &[1, c_in, 4, 4], INIT_STD, rng)?;
        p.zeros("score.bias", &[1])?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let s = self.config.stride();
        let ok = dims.len() == 4
            && dims[1] == self.config.in_channels
            && dims[2] % s == 0
            && dims[3] % s == 0
            && dims[2] >= 2 * s
            && dims[3] >= 2 * s;
        if !ok {
            return Err(Error::shape(
                "discriminator input",
                format!(
                    "(n, {}, h, w) with h, w multiples of {s} and at least {}",
                    self.config.in_channels,
                    2 * s
                ),
                dims,
            ));
        }
        let mut h = x.clone();
        for k in 0..self.config.n_layers {
            h = conv2d(
                &h,
                self.params.get(&format!("conv{k}.weight"))?,
                self.params.get(&format!("conv{k}.bias"))?,
                2,
                1,
            )?;
            if k > 0 {
                h = instance_norm(&h)?;
            }
            h = leaky_relu(&h, LEAKY_SLOPE)?;
        }
        conv2d(
            &h,
            self.params.get("score.weight")?,
            self.params.get("score.bias")?,
            1,
            1,
        )
    }
}
