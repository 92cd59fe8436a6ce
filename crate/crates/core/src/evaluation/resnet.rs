//! Inference-only ResNet-101 trunk (first three residual stages) reading
//! torchvision-named weights from a safetensors file.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops, ImageBuffer, Rgb};

use super::extractor::{as_rgb, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::conv;

pub const EXTRACTOR_ENV: &str = "CORONAGAN_EXTRACTOR_PATH";
pub const INPUT_SIZE: u32 = 224;
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const RESNET101_BLOCKS: [usize; 3] = [3, 4, 23];
const BN_EPS: f64 = 1e-5;

/// Convolution followed by batch norm in eval mode, folded into a
/// per-channel scale and shift.
struct ConvBn {
    weight: Tensor,
    scale: Tensor,
    shift: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    fn load(t: &HashMap<String, Tensor>, conv: &str, bn: &str, stride: usize) -> Result<Self> {
        let get = |k: String| -> Result<Tensor> {
            t.get(&k)
                .ok_or_else(|| Error::Missing(format!("extractor weights lack tensor `{k}`")))
                .and_then(|x| Ok(x.to_dtype(DType::F32)?))
        };
        let weight = get(format!("{conv}.weight"))?;
        let gamma = get(format!("{bn}.weight"))?;
        let beta = get(format!("{bn}.bias"))?;
        let mean = get(format!("{bn}.running_mean"))?;
        let var = get(format!("{bn}.running_var"))?;
        let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
        let shift = (beta - (&mean * &scale)?)?;
        let c = weight.dim(0)?;
        Ok(Self {
            pad: weight.dim(2)? / 2,
            weight,
            scale: scale.reshape((1, c, 1, 1))?,
            shift: shift.reshape((1, c, 1, 1))?,
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(y.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    down: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.c1.forward(x)?.relu()?;
        let y = self.c2.forward(&y)?.relu()?;
        let y = self.c3.forward(&y)?;
        let skip = match &self.down {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

pub struct ResNetExtractor {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
    input_size: u32,
}

impl ResNetExtractor {
    /// Reads the path in `CORONAGAN_EXTRACTOR_PATH`.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(EXTRACTOR_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => Err(Error::Missing(format!(
                "ResNet-101 weights not configured: set {EXTRACTOR_ENV} to a torchvision resnet101 \
                 .safetensors file, or pass --extractor fallback"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing(format!(
                "extractor weights {} not found; point {EXTRACTOR_ENV} at a resnet101 .safetensors file",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::format(path, e))?;
        Self::from_tensors(&tensors, RESNET101_BLOCKS, INPUT_SIZE)
    }

    /// Builds the trunk from torchvision parameter names with the given
    /// number of bottleneck blocks in `layer1..layer3`.
    pub fn from_tensors(t: &HashMap<String, Tensor>, blocks: [usize; 3], input_size: u32) -> Result<Self> {
        let stem = ConvBn::load(t, "conv1", "bn1", 2)?;
        let mut layers = Vec::new();
        for (l, &n) in blocks.iter().enumerate() {
            let mut layer = Vec::new();
            for b in 0..n {
                let p = format!("layer{}.{b}", l + 1);
                let stride = if b == 0 && l > 0 { 2 } else { 1 };
                let down_key = format!("{p}.downsample.0.weight");
                layer.push(Bottleneck {
                    c1: ConvBn::load(t, &format!("{p}.conv1"), &format!("{p}.bn1"), 1)?,
                    c2: ConvBn::load(t, &format!("{p}.conv2"), &format!("{p}.bn2"), stride)?,
                    c3: ConvBn::load(t, &format!("{p}.conv3"), &format!("{p}.bn3"), 1)?,
                    down: match t.contains_key(&down_key) {
                        true => Some(ConvBn::load(
                            t,
                            &format!("{p}.downsample.0"),
                            &format!("{p}.downsample.1"),
                            stride,
                        )?),
                        false => None,
                    },
                });
            }
            layers.push(layer);
        }
        Ok(Self {
            stem,
            layers,
            input_size,
        })
    }

    /// Bilinear resize to the native input size and ImageNet standardization.
    fn preprocess(&self, image: &ImageTensor) -> Result<Tensor> {
        let image = as_rgb(image)?;
        let (_, h, w) = image.dims();
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            Rgb([image.get(0, r, c), image.get(1, r, c), image.get(2, r, c)])
        });
        let s = self.input_size;
        let resized = imageops::resize(&buf, s, s, imageops::FilterType::Triangle);
        let n = (s * s) as usize;
        let mut data = vec![0f32; 3 * n];
        for (i, px) in resized.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = (px[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Ok(Tensor::from_vec(data, (1, 3, s as usize, s as usize), &Device::Cpu)?)
    }
}

impl FeatureExtractor for ResNetExtractor {
    fn name(&self) -> &'static str {
        "resnet101"
    }

    fn stage_channels(&self, stage: usize) -> usize {
        256 << (stage - 1)
    }

    fn stages(&self, image: &ImageTensor) -> Result<Vec<Tensor>> {
        let x = self.stem.forward(&self.preprocess(image)?)?.relu()?;
        // Post-ReLU activations are non-negative, so zero padding acts like
        // the usual -inf padding of the 3×3 max pool.
        let mut x = x
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        let mut out = Vec::with_capacity(3);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}
