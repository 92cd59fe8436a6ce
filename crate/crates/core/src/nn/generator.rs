use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, conv_transpose2d, instance_norm, reflect_pad2d, sigmoid};
use super::params::Params;
use super::INIT_STD;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub n_down: usize,
}

impl GeneratorConfig {
    pub fn oct_to_histology(base_width: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels: 3,
            base_width,
            n_resblocks: 5,
            n_down: 3,
        }
    }

    pub fn histology_to_oct(base_width: usize) -> Self {
        Self {
            in_channels: 3,
            out_channels: 1,
            ..Self::oct_to_histology(base_width)
        }
    }

    /// Channels after encoder layer `k` (0-based).
    pub fn encoder_width(&self, k: usize) -> usize {
        self.base_width << (k + 1)
    }

    pub fn embedding_channels(&self) -> usize {
        self.base_width << self.n_down
    }

    pub fn scale(&self) -> usize {
        1 << self.n_down
    }

    pub fn embedding_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (self.embedding_channels(), height / self.scale(), width / self.scale())
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::validation("generator config", "channel counts must be ≥ 1"));
        }
        if self.n_down == 0 || self.n_down > 6 {
            return Err(Error::validation("generator config", "n_down must be in 1..=6"));
        }
        Ok(())
    }
}

/// Encoder (stride-2 convolutions) → residual trunk → decoder (stride-2
/// transposed convolutions) → sigmoid. The post-trunk tensor is the
/// embedding shared with the structure head.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: Params,
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, dtype: DType, device: &Device, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Params::new(dtype, device);
        let mut c_in = config.in_channels;
        for k in 0..config.n_down {
            let c_out = config.encoder_width(k);
            p.gaussian(&format!("enc.{k}.weight"), &[c_out, c_in, 3, 3], INIT_STD, rng)?;
            p.zeros(&format!("enc.{k}.bias"), &[c_out])?;
            c_in = c_out;
        }
        let c = config.embedding_channels();
        for i in 0..config.n_resblocks {
            for j in 1..=2 {
                p.gaussian(&format!("res.{i}.conv{j}.weight"), &[c, c, 3, 3], INIT_STD, rng)?;
                p.zeros(&format!("res.{i}.conv{j}.bias"), &[c])?;
            }
        }
        for k in 0..config.n_down {
            let c_out = if k + 1 == config.n_down {
                config.out_channels
            } else {
                c_in / 2
            };
            // transposed-conv weights are (c_in, c_out, k, k)
            p.gaussian(&format!("dec.{k}.weight"), &[c_in, c_out, 4, 4], INIT_STD, rng)?;
            p.zeros(&format!("dec.{k}.bias"), &[c_out])?;
            c_in = c_out;
        }
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let s = self.config.scale();
        let ok = dims.len() == 4
            && dims[1] == self.config.in_channels
            && dims[2] % s == 0
            && dims[3] % s == 0
            && dims[2] > 0
            && dims[3] > 0;
        if !ok {
            return Err(Error::shape(
                "generator input",
                format!("(n, {}, h, w) with h, w multiples of {s}", self.config.in_channels),
                dims,
            ));
        }
        Ok(())
    }

    pub fn encoder(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for k in 0..self.config.n_down {
            h = reflect_pad2d(&h, 1)?;
            h = conv2d(
                &h,
                self.params.get(&format!("enc.{k}.weight"))?,
                self.params.get(&format!("enc.{k}.bias"))?,
                2,
                0,
            )?;
            h = instance_norm(&h)?.relu()?;
        }
        Ok(h)
    }

    pub fn trunk(&self, h: &Tensor) -> Result<Tensor> {
        let mut h = h.clone();
        for i in 0..self.config.n_resblocks {
            let w = |j: usize, what: &str| self.params.get(&format!("res.{i}.conv{j}.{what}"));
            let mut r = conv2d(&reflect_pad2d(&h, 1)?, w(1, "weight")?, w(1, "bias")?, 1, 0)?;
            r = instance_norm(&r)?.relu()?;
            r = conv2d(&reflect_pad2d(&r, 1)?, w(2, "weight")?, w(2, "bias")?, 1, 0)?;
            r = instance_norm(&r)?;
            h = (h + r)?;
        }
        Ok(h)
    }

    /// Image → embedding (encoder then residual trunk).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk(&self.encoder(x)?)
    }

    pub fn decode(&self, emb: &Tensor) -> Result<Tensor> {
        let dims = emb.dims();
        if dims.len() != 4 || dims[1] != self.config.embedding_channels() {
            return Err(Error::shape(
                "generator embedding",
                format!("(n, {}, h, w)", self.config.embedding_channels()),
                dims,
            ));
        }
        let mut h = emb.clone();
        for k in 0..self.config.n_down {
            h = conv_transpose2d(
                &h,
                self.params.get(&format!("dec.{k}.weight"))?,
                self.params.get(&format!("dec.{k}.bias"))?,
                2,
                1,
            )?;
            if k + 1 < self.config.n_down {
                h = instance_norm(&h)?.relu()?;
            }
        }
        sigmoid(&h)
    }

    /// Returns `(translated image, embedding)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.encode(x)?;
        let out = self.decode(&emb)?;
        Ok((out, emb))
    }
}
