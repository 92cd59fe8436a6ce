use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::params::Params;
use super::INIT_STD;
use crate::error::{Error, Result};
use crate::nn::layers::conv2d;

/// Coronary structure head: a stride-1 1×1 convolution mapping the
/// embedding to per-pixel layer logits.
#[derive(Debug, Clone)]
pub struct StructureHead {
    in_channels: usize,
    n_classes: usize,
    params: Params,
}

impl StructureHead {
    pub fn new<R: Rng>(
        in_channels: usize,
        n_classes: usize,
        dtype: DType,
        device: &Device,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Params::new(dtype, device);
        p.gaussian("weight", &[n_classes, in_channels, 1, 1], INIT_STD, rng)?;
        p.zeros("bias", &[n_classes])?;
        Ok(Self {
            in_channels,
            n_classes,
            params: p,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let dims = emb.dims();
        if dims.len() != 4 || dims[1] != self.in_channels {
            return Err(Error::shape(
                "structure head input",
                format!("(n, {}, h, w)", self.in_channels),
                dims,
            ));
        }
        conv2d(emb, self.params.get("weight")?, self.params.get("bias")?, 1, 0)
    }
}
