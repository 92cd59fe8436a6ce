//! Perceptual Hash Value scoring of virtual against real histology.
//!
//! PHV at stage `i` is the percentage of feature channels whose globally
//! average-pooled activations differ by at most `T`; 100 means every
//! channel agrees.

mod extractor;
mod resnet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use extractor::{as_rgb, FallbackExtractor, FeatureExtractor, FALLBACK_WIDTHS};
pub use resnet::{ResNetExtractor, EXTRACTOR_ENV, IMAGENET_MEAN, IMAGENET_STD, RESNET101_BLOCKS};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor};
use crate::nn::Generator;
use crate::phantom::Manifest;

pub const DEFAULT_THRESHOLD: f64 = 0.005;
pub const N_STAGES: usize = 3;
/// Seed of the fallback extractor when none is given.
pub const FALLBACK_SEED: u64 = 0;

fn check_stage(i: usize) -> Result<()> {
    if (1..=N_STAGES).contains(&i) {
        Ok(())
    } else {
        Err(Error::validation("stage", format!("{i} not in 1..={N_STAGES}")))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::validation("threshold", format!("{t} must be positive")))
    }
}

/// Channel means of every stage.
pub fn pooled_stages(extractor: &dyn FeatureExtractor, image: &ImageTensor) -> Result<Vec<Vec<f64>>> {
    extractor
        .stages(image)?
        .iter()
        .map(|f| {
            let (_, c, _, _) = f.dims4()?;
            let m = f.mean((2, 3))?.reshape(c)?.to_dtype(DType::F64)?;
            Ok(m.to_vec1::<f64>()?)
        })
        .collect()
}

/// Global average pool of stage `i` (1-based).
pub fn pooled_features(extractor: &dyn FeatureExtractor, image: &ImageTensor, i: usize) -> Result<Vec<f64>> {
    check_stage(i)?;
    Ok(pooled_stages(extractor, image)?.swap_remove(i - 1))
}

/// PHV from two pooled vectors.
pub fn phv_from_pooled(a: &[f64], b: &[f64], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("phv pooled features", a.len(), b.len()));
    }
    let d = &Device::Cpu;
    let diff = (Tensor::from_slice(a, a.len(), d)? - Tensor::from_slice(b, b.len(), d)?)?.abs()?;
    let agree = diff
        .le(threshold)?
        .to_dtype(DType::U32)?
        .sum_all()?
        .to_scalar::<u32>()?;
    Ok(100.0 * agree as f64 / a.len() as f64)
}

pub fn phv(
    real: &ImageTensor,
    virtual_: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    i: usize,
    threshold: f64,
) -> Result<f64> {
    check_stage(i)?;
    check_threshold(threshold)?;
    if real.dims() != virtual_.dims() {
        return Err(Error::shape("phv image pair", real.dims(), virtual_.dims()));
    }
    let a = pooled_features(extractor, real, i)?;
    let b = pooled_features(extractor, virtual_, i)?;
    phv_from_pooled(&a, &b, threshold)
}

/// How virtual images are matched with unpaired real ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Average over every (virtual, real) combination.
    #[default]
    Mean,
    /// For each virtual image keep its best-scoring real image.
    Best,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Mean => "mean",
            Pairing::Best => "best",
        })
    }
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pairing::Mean),
            "best" => Ok(Pairing::Best),
            _ => Err(Error::validation("pairing", format!("`{s}` (expected mean or best)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhvReport {
    pub phv_1: f64,
    pub phv_2: f64,
    pub phv_3: f64,
    #[serde(rename = "T")]
    pub threshold: f64,
    pub n_pairs: usize,
    pub pairing: Pairing,
    pub extractor: String,
    /// Per stage, the mean absolute pooled difference of each channel over
    /// all scored pairs.
    pub channel_abs_diff: Vec<Vec<f64>>,
}

impl PhvReport {
    pub fn scores(&self) -> [f64; 3] {
        [self.phv_1, self.phv_2, self.phv_3]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores every virtual image against the real pool.
pub fn score_pairs(
    virtuals: &[ImageTensor],
    reals: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
    threshold: f64,
    pairing: Pairing,
) -> Result<PhvReport> {
    check_threshold(threshold)?;
    if virtuals.is_empty() || reals.is_empty() {
        return Err(Error::validation(
            "test set",
            "needs at least one virtual and one real image",
        ));
    }
    let pool = |imgs: &[ImageTensor]| -> Result<Vec<Vec<Vec<f64>>>> {
        imgs.par_iter().map(|x| pooled_stages(extractor, x)).collect()
    };
    let pv = pool(virtuals)?;
    let pr = pool(reals)?;

    let mut scores = [0.0f64; N_STAGES];
    let mut diffs: Vec<Vec<f64>> = (1..=N_STAGES).map(|i| vec![0.0; extractor.stage_channels(i)]).collect();
    for v in &pv {
        for s in 0..N_STAGES {
            let mut best = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for r in &pr {
                let p = phv_from_pooled(&v[s], &r[s], threshold)?;
                best = best.max(p);
                sum += p;
                for (d, (a, b)) in diffs[s].iter_mut().zip(v[s].iter().zip(&r[s])) {
                    *d += (a - b).abs();
                }
            }
            scores[s] += match pairing {
                Pairing::Mean => sum / pr.len() as f64,
                Pairing::Best => best,
            };
        }
    }
    let n_all = (pv.len() * pr.len()) as f64;
    for d in diffs.iter_mut().flatten() {
        *d /= n_all;
    }
    let k = pv.len() as f64;
    Ok(PhvReport {
        phv_1: scores[0] / k,
        phv_2: scores[1] / k,
        phv_3: scores[2] / k,
        threshold,
        n_pairs: match pairing {
            Pairing::Mean => pv.len() * pr.len(),
            Pairing::Best => pv.len(),
        },
        pairing,
        extractor: extractor.name().to_string(),
        channel_abs_diff: diffs,
    })
}

/// Translates one image with a generator (whole image, no patching).
pub fn translate(generator: &Generator, image: &ImageTensor) -> Result<ImageTensor> {
    let x = image.to_tensor(generator.params().dtype(), generator.params().device())?;
    let (y, _) = generator.forward(&x)?;
    ImageTensor::from_tensor(&y)
}

/// Runs O→H on every OCT image of `manifest` and scores the results
/// against its histology images.
pub fn evaluate_testset(
    generator_oh: &Generator,
    manifest: &Manifest,
    extractor: &dyn FeatureExtractor,
    threshold: f64,
    pairing: Pairing,
) -> Result<PhvReport> {
    let load = |d: Domain| -> Result<Vec<ImageTensor>> {
        manifest.domain(d).map(|r| Ok(manifest.load_sample(r)?.image)).collect()
    };
    let virtuals = load(Domain::Oct)?
        .iter()
        .map(|x| translate(generator_oh, x))
        .collect::<Result<Vec<_>>>()?;
    let reals = load(Domain::Histology)?;
    score_pairs(&virtuals, &reals, extractor, threshold, pairing)
}
