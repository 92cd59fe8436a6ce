//! Patch extraction, flip augmentation and unpaired batch assembly.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor, LabeledSample, SegmentationMask};
use crate::phantom::Manifest;
use crate::seed::{rng_for, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: ImageTensor,
    pub mask: SegmentationMask,
    pub domain: Domain,
    pub source_id: String,
    /// Top-left corner in the source image, `(row, col)`.
    pub origin: (usize, usize),
}

impl Patch {
    pub fn flipped(&self) -> Self {
        Self {
            image: self.image.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
            ..self.clone()
        }
    }
}

fn tile_origins(height: usize, width: usize, patch_size: usize) -> Vec<(usize, usize)> {
    let mut origins = Vec::new();
    for r in 0..height / patch_size {
        for c in 0..width / patch_size {
            origins.push((r * patch_size, c * patch_size));
        }
    }
    origins
}

/// Non-overlapping tiles anchored at the top-left corner; partial tiles on
/// the right and bottom edges are dropped.
pub fn extract_patches(sample: &LabeledSample, patch_size: usize, source_id: &str) -> Result<Vec<Patch>> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if patch_size == 0 || h < patch_size || w < patch_size {
        return Err(Error::validation(
            "patch size",
            format!("{source_id}: image {h}×{w} is smaller than patch {patch_size}"),
        ));
    }
    Ok(tile_origins(h, w, patch_size)
        .into_iter()
        .map(|(r, c)| Patch {
            image: sample.image.crop(r, c, patch_size, patch_size),
            mask: sample.mask.crop(r, c, patch_size, patch_size),
            domain: sample.domain,
            source_id: source_id.to_string(),
            origin: (r, c),
        })
        .collect())
}

/// Mirrors image and mask left-to-right together with probability `flip_prob`.
pub fn augment_flip<R: Rng + ?Sized>(patch: &Patch, flip_prob: f64, rng: &mut R) -> Patch {
    if rng.random_bool(flip_prob) {
        patch.flipped()
    } else {
        patch.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub shuffle_seed: u64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            patch_size: 288,
            batch_size: 16,
            flip_prob: 0.5,
            shuffle_seed: 0,
        }
    }
}

/// Two independent patch lists. Index `i` of one half bears no relation to
/// index `i` of the other.
#[derive(Debug, Clone)]
pub struct UnpairedBatch {
    pub oct: Vec<Patch>,
    pub hist: Vec<Patch>,
}

impl UnpairedBatch {
    pub fn len(&self) -> usize {
        self.oct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oct.is_empty()
    }
}

struct PatchRef {
    sample: usize,
    origin: (usize, usize),
}

struct DomainPool {
    domain: Domain,
    samples: Vec<(String, LabeledSample)>,
    patches: Vec<PatchRef>,
}

impl DomainPool {
    fn load(manifest: &Manifest, domain: Domain, patch_size: usize) -> Result<Self> {
        let samples = manifest
            .domain(domain)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|rec| {
                let s = manifest.load_sample(rec)?;
                Ok((rec.path.display().to_string(), s))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut patches = Vec::new();
        for (i, (id, s)) in samples.iter().enumerate() {
            let (h, w) = (s.image.height(), s.image.width());
            if h < patch_size || w < patch_size {
                return Err(Error::format(
                    manifest.resolve(id.as_ref()),
                    format!("image {h}×{w} is smaller than patch {patch_size}"),
                ));
            }
            patches.extend(
                tile_origins(h, w, patch_size)
                    .into_iter()
                    .map(|origin| PatchRef { sample: i, origin }),
            );
        }
        if patches.is_empty() {
            return Err(Error::validation(
                "manifest",
                format!("no {} samples listed", domain.name()),
            ));
        }
        Ok(Self {
            domain,
            samples,
            patches,
        })
    }

    fn materialize(&self, idx: usize, patch_size: usize) -> Patch {
        let pr = &self.patches[idx];
        let (id, s) = &self.samples[pr.sample];
        let (r, c) = pr.origin;
        Patch {
            image: s.image.crop(r, c, patch_size, patch_size),
            mask: s.mask.crop(r, c, patch_size, patch_size),
            domain: self.domain,
            source_id: id.clone(),
            origin: pr.origin,
        }
    }

    fn permutation(&self, seed: u64, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.patches.len()).collect();
        let mut rng = rng_for(seed, &[tag::SHUFFLE, epoch as u64, self.domain as u64]);
        idx.shuffle(&mut rng);
        idx
    }
}

/// Yields shuffled, flip-augmented unpaired batches. An epoch lasts
/// `ceil(max(n_oct, n_hist) / batch_size)` steps and the smaller domain
/// wraps around, so every patch of both domains appears at least once.
/// The batch sequence depends only on `(shuffle_seed, epoch)`.
pub struct Loader {
    config: LoaderConfig,
    oct: DomainPool,
    hist: DomainPool,
}

impl Loader {
    pub fn new(manifest: &Manifest, config: LoaderConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::validation("batch size", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&config.flip_prob) {
            return Err(Error::validation(
                "flip_prob",
                format!("{} not in [0, 1]", config.flip_prob),
            ));
        }
        let oct = DomainPool::load(manifest, Domain::Oct, config.patch_size)?;
        let hist = DomainPool::load(manifest, Domain::Histology, config.patch_size)?;
        Ok(Self { config, oct, hist })
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.config
    }

    pub fn n_patches(&self, domain: Domain) -> usize {
        match domain {
            Domain::Oct => self.oct.patches.len(),
            Domain::Histology => self.hist.patches.len(),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.oct
            .patches
            .len()
            .max(self.hist.patches.len())
            .div_ceil(self.config.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> EpochIter<'_> {
        EpochIter {
            loader: self,
            epoch,
            step: 0,
            oct_perm: self.oct.permutation(self.config.shuffle_seed, epoch),
            hist_perm: self.hist.permutation(self.config.shuffle_seed, epoch),
        }
    }
}

pub struct EpochIter<'a> {
    loader: &'a Loader,
    epoch: usize,
    step: usize,
    oct_perm: Vec<usize>,
    hist_perm: Vec<usize>,
}

impl EpochIter<'_> {
    fn draw(&self, pool: &DomainPool, perm: &[usize], position: usize) -> Patch {
        let cfg = &self.loader.config;
        let patch = pool.materialize(perm[position % perm.len()], cfg.patch_size);
        let mut rng = rng_for(
            cfg.shuffle_seed,
            &[tag::FLIP, self.epoch as u64, pool.domain as u64, position as u64],
        );
        augment_flip(&patch, cfg.flip_prob, &mut rng)
    }
}

impl Iterator for EpochIter<'_> {
    type Item = UnpairedBatch;

    fn next(&mut self) -> Option<UnpairedBatch> {
        if self.step >= self.loader.steps_per_epoch() {
            return None;
        }
        let b = self.loader.config.batch_size;
        let positions = self.step * b..(self.step + 1) * b;
        self.step += 1;
        Some(UnpairedBatch {
            oct: positions
                .clone()
                .map(|p| self.draw(&self.loader.oct, &self.oct_perm, p))
                .collect(),
            hist: positions
                .map(|p| self.draw(&self.loader.hist, &self.hist_perm, p))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> LabeledSample {
        let data = (0..h * w).map(|i| (i % 251) as f32 / 250.0).collect();
        let image = ImageTensor::from_vec(1, h, w, data).unwrap();
        let mask = SegmentationMask::from_vec(h, w, (0..h * w).map(|i| (i % 3) as u8).collect()).unwrap();
        LabeledSample::new(image, mask, Domain::Oct).unwrap()
    }

    #[test]
    fn exact_tiling() {
        let p = extract_patches(&sample(576, 576), 288, "s").unwrap();
        let origins: Vec<_> = p.iter().map(|p| p.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 288), (288, 0), (288, 288)]);
    }

    #[test]
    fn remainder_is_discarded() {
        let p = extract_patches(&sample(600, 600), 288, "s").unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|p| p.image.dims() == (1, 288, 288)));
    }

    #[test]
    fn undersized_sample_is_an_error() {
        assert!(extract_patches(&sample(100, 400), 288, "s").is_err());
    }

    #[test]
    fn reassembled_masks_match_source() {
        let s = sample(50, 70);
        let ps = 16;
        let patches = extract_patches(&s, ps, "s").unwrap();
        let (nh, nw) = (50 / ps * ps, 70 / ps * ps);
        let mut canvas = SegmentationMask::filled(nh, nw, 9);
        for p in &patches {
            for r in 0..ps {
                for c in 0..ps {
                    canvas.set(p.origin.0 + r, p.origin.1 + c, p.mask.get(r, c));
                }
            }
        }
        assert_eq!(canvas, s.mask.crop(0, 0, nh, nw));
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let image = ImageTensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = SegmentationMask::from_vec(2, 2, vec![0, 1, 2, 0]).unwrap();
        let p = Patch {
            image,
            mask,
            domain: Domain::Oct,
            source_id: "x".into(),
            origin: (0, 0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = augment_flip(&p, 1.0, &mut rng);
        assert_eq!(f.image.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(f.mask.data(), &[1, 0, 0, 2]);
        assert_eq!(augment_flip(&f, 1.0, &mut rng), p);
        assert_eq!(augment_flip(&p, 0.0, &mut rng), p);
    }

    #[test]
    fn flip_frequency_near_half() {
        let s = sample(2, 3);
        let p = extract_patches(&s, 2, "s").unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let flips = (0..n).filter(|_| augment_flip(&p, 0.5, &mut rng) != p).count();
        let freq = flips as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "flip frequency {freq}");
    }

    #[test]
    fn flip_preserves_class_histogram() {
        let s = sample(32, 32);
        let p = extract_patches(&s, 32, "s").unwrap().remove(0);
        assert_eq!(p.flipped().mask.histogram(3), p.mask.histogram(3));
    }
}
