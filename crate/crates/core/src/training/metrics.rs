//! Held-out quality measures for a trained model.

use candle_core::DType;

use crate::error::{Error, Result};
use crate::image::{Downsample, ImageTensor, LabeledSample};
use crate::nn::{Generator, StructureHead};

/// Fraction of embedding-grid cells whose argmax head prediction equals the
/// downsampled label.
pub fn head_accuracy(
    generator: &Generator,
    head: &StructureHead,
    samples: &[LabeledSample],
    mode: Downsample,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let factor = generator.config().scale();
    for s in samples {
        let x = s
            .image
            .to_tensor(generator.params().dtype(), generator.params().device())?;
        let (_, emb) = generator.forward(&x)?;
        let pred = head
            .forward(&emb)?
            .argmax(1)?
            .flatten_all()?
            .to_dtype(DType::U32)?
            .to_vec1::<u32>()?;
        let labels = s.mask.downsample(factor, mode)?;
        if labels.data().len() != pred.len() {
            return Err(Error::shape("head prediction", labels.data().len(), pred.len()));
        }
        hit += pred
            .iter()
            .zip(labels.data())
            .filter(|(p, l)| **p == **l as u32)
            .count();
        total += pred.len();
    }
    if total == 0 {
        return Err(Error::validation("samples", "empty held-out set"));
    }
    Ok(hit as f64 / total as f64)
}

/// Mean absolute error of `backward(forward(x))` against `x`.
pub fn cycle_l1(forward: &Generator, backward: &Generator, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("images", "empty held-out set"));
    }
    let mut sum = 0.0;
    for img in images {
        let x = img.to_tensor(forward.params().dtype(), forward.params().device())?;
        let (y, _) = forward.forward(&x)?;
        let (r, _) = backward.forward(&y)?;
        sum += (r - &x)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sum / images.len() as f64)
}
