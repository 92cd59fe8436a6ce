//! Adversarial (least-squares), cycle, embedding and coronary structure
//! losses, and their weighted generator objective.
//!
//! All tensor losses return 0-d tensors so they can be differentiated.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::log_softmax_channels;

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `mean((s − 1)²)` over every patch score.
pub fn adversarial_loss_g(fake_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores - 1.0)?.sqr()?.mean_all()?)
}

/// `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn adversarial_loss_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = (real_scores - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_scores.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// `mean|rec_o − o| + mean|rec_h − h|`.
pub fn cycle_loss(o: &Tensor, rec_o: &Tensor, h: &Tensor, rec_h: &Tensor) -> Result<Tensor> {
    same_shape("cycle loss (OCT)", o, rec_o)?;
    same_shape("cycle loss (histology)", h, rec_h)?;
    Ok((mean_abs_diff(rec_o, o)? + mean_abs_diff(rec_h, h)?)?)
}

/// Mean L1 between the reverse generator's encoding of each fake image and
/// the embedding the forward generator decoded that fake from.
pub fn embedding_loss(
    emb_from_fake_h: &Tensor,
    emb_used_for_h: &Tensor,
    emb_from_fake_o: &Tensor,
    emb_used_for_o: &Tensor,
) -> Result<Tensor> {
    same_shape("embedding loss (O→H)", emb_from_fake_h, emb_used_for_h)?;
    same_shape("embedding loss (H→O)", emb_from_fake_o, emb_used_for_o)?;
    Ok((mean_abs_diff(emb_from_fake_h, emb_used_for_h)? + mean_abs_diff(emb_from_fake_o, emb_used_for_o)?)?)
}

/// Pixel-mean cross-entropy of `(n, C, h, w)` logits against `(n, h, w)`
/// integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.dims() != [n, h, w] {
        return Err(Error::shape("cross-entropy labels", (n, h, w), labels.dims()));
    }
    let labels = labels.to_dtype(DType::U32)?;
    let max = labels.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max as usize >= c {
        return Err(Error::validation(
            "label",
            format!("class id {max} out of range for {c} classes"),
        ));
    }
    let logp = log_softmax_channels(logits)?;
    let picked = logp.gather(&labels.unsqueeze(1)?.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Matched-domain structural loss: OCT labels supervise the head on the
/// OCT→histology generator's embedding, histology labels the other head.
pub fn coronary_loss(logits_o: &Tensor, labels_o: &Tensor, logits_h: &Tensor, labels_h: &Tensor) -> Result<Tensor> {
    Ok((cross_entropy(logits_o, labels_o)? + cross_entropy(logits_h, labels_h)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 5.0,
            gamma: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::validation(
                "loss weights",
                format!("{self:?} must be finite and ≥ 0"),
            ));
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g_oh: f64,
    pub adv_g_ho: f64,
    pub adv_d_h: f64,
    pub adv_d_o: f64,
    pub cycle: f64,
    pub embedding: f64,
    pub coronary: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g_oh: f64,
    pub adv_g_ho: f64,
    pub adv_d_h: f64,
    pub adv_d_o: f64,
    pub cycle: f64,
    pub embedding: f64,
    pub coronary: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("adv_g_OH", self.adv_g_oh),
            ("adv_g_HO", self.adv_g_ho),
            ("adv_d_H", self.adv_d_h),
            ("adv_d_O", self.adv_d_o),
            ("cycle", self.cycle),
            ("embedding", self.embedding),
            ("coronary", self.coronary),
            ("total_g", self.total_g),
        ]
    }

    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// `adv_g_oh + adv_g_ho + α·cycle + β·embedding + γ·coronary`.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        adv_g_oh: parts.adv_g_oh,
        adv_g_ho: parts.adv_g_ho,
        adv_d_h: parts.adv_d_h,
        adv_d_o: parts.adv_d_o,
        cycle: parts.cycle,
        embedding: parts.embedding,
        coronary: parts.coronary,
        total_g: parts.adv_g_oh
            + parts.adv_g_ho
            + weights.alpha * parts.cycle
            + weights.beta * parts.embedding
            + weights.gamma * parts.coronary,
    }
}

/// Differentiable counterpart of [`total_generator_loss`].
pub fn weighted_generator_objective(
    adv_g_oh: &Tensor,
    adv_g_ho: &Tensor,
    cycle: &Tensor,
    embedding: &Tensor,
    coronary: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    let t = ((adv_g_oh + adv_g_ho)? + (cycle * weights.alpha)?)?;
    let t = (t + (embedding * weights.beta)?)?;
    Ok((t + (coronary * weights.gamma)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
