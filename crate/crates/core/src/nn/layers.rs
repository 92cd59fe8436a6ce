//! Differentiable building blocks on top of candle tensors (NCHW layout).

use candle_core::{Tensor, D};

use super::conv;
use crate::error::Result;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Zero-padded convolution with bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let y = conv::conv2d(x, weight, stride, padding)?;
    add_bias(&y, bias)
}

/// Transposed convolution; `weight` is `(c_in, c_out, k, k)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let y = conv::conv_transpose2d(x, weight, stride, padding)?;
    add_bias(&y, bias)
}

/// Index of the mirrored sample for position `i` (which may be negative or
/// past the end) on an axis of length `n`, excluding the edge sample itself.
/// Axes of length 1 replicate.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

pub fn reflect_pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    Ok(conv::reflect_pad2d(x, pad)?)
}

/// Per-sample, per-channel normalization over spatial positions, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable log-softmax over dim 1.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let shift = logits.max_keepdim(1)?.detach();
    let z = logits.broadcast_sub(&shift)?;
    let lse = z.exp()?.sum_keepdim(1)?.log()?;
    Ok(z.broadcast_sub(&lse)?)
}

pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_channels(logits)?.exp()?)
}
