use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::layers;
use crate::seed::{rng_for, tag};

/// Frozen convolutional feature extractor exposing three stages.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    fn stage_channels(&self, stage: usize) -> usize;

    /// Feature maps `(1, c_i, h_i, w_i)` for stages 1, 2 and 3 of a
    /// 3-channel image with values in `[0, 1]`.
    fn stages(&self, image: &ImageTensor) -> Result<Vec<Tensor>>;
}

/// Brings grayscale images to three channels and rejects anything else.
pub fn as_rgb(image: &ImageTensor) -> Result<ImageTensor> {
    match image.channels() {
        3 => Ok(image.clone()),
        1 => {
            let (_, h, w) = image.dims();
            let data = image.data().repeat(3);
            ImageTensor::from_vec(3, h, w, data)
        }
        c => Err(Error::validation(
            "extractor input",
            format!("expected 3 channels (or 1 to replicate), got {c}"),
        )),
    }
}

struct Stage {
    weight: Tensor,
    bias: Tensor,
}

/// Seeded random CNN used when no pretrained weights are available: three
/// stages of `3×3 conv → ReLU → 2×2 average pool` with widths 16, 32, 64.
pub struct FallbackExtractor {
    stages: Vec<Stage>,
}

pub const FALLBACK_WIDTHS: [usize; 3] = [16, 32, 64];

impl FallbackExtractor {
    /// He-normal weights and zero biases, fully determined by `seed`.
    pub fn new(seed: u64) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (k, &c_out) in FALLBACK_WIDTHS.iter().enumerate() {
            let fan_in = c_in * 9;
            let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            let mut rng = rng_for(seed, &[tag::EXTRACTOR, k as u64]);
            let w: Vec<f32> = (0..c_out * fan_in).map(|_| dist.sample(&mut rng)).collect();
            stages.push(Stage {
                weight: Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?,
                bias: Tensor::zeros(c_out, DType::F32, &Device::Cpu)?,
            });
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    /// Custom weights `(c_out, c_in, k, k)` with odd `k`, one per stage.
    pub fn from_weights(weights: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if weights.len() != 3 {
            return Err(Error::validation(
                "extractor",
                format!("need 3 stages, got {}", weights.len()),
            ));
        }
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (w, b) in weights {
            let (c_out, ci, k, k2) = w.dims4()?;
            if ci != c_in || k != k2 || k % 2 == 0 || b.dims() != [c_out] {
                return Err(Error::shape("extractor stage", (c_out, c_in, k, k), w.dims()));
            }
            stages.push(Stage {
                weight: w.to_dtype(DType::F32)?,
                bias: b.to_dtype(DType::F32)?,
            });
            c_in = c_out;
        }
        Ok(Self { stages })
    }
}

impl FeatureExtractor for FallbackExtractor {
    fn name(&self) -> &'static str {
        "fallback"
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.stages[stage - 1].weight.dim(0).unwrap_or(0)
    }

    fn stages(&self, image: &ImageTensor) -> Result<Vec<Tensor>> {
        let image = as_rgb(image)?;
        let (_, h, w) = image.dims();
        if h < 8 || w < 8 {
            return Err(Error::validation(
                "extractor input",
                format!("{h}x{w} is smaller than 8x8"),
            ));
        }
        let mut x = image.to_tensor(DType::F32, &Device::Cpu)?;
        let mut out = Vec::with_capacity(3);
        for s in &self.stages {
            let pad = s.weight.dim(2)? / 2;
            x = layers::conv2d(&x, &s.weight, &s.bias, 1, pad)?.relu()?.avg_pool2d(2)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}
