//! Parametric three-layer coronary wall phantoms.
//!
//! A phantom is a full-field slab of tissue with two sinusoidal interfaces
//! splitting it into intima (class 0), media (class 1) and adventitia
//! (class 2), top to bottom. The same geometry can be rendered as a
//! single-channel OCT-like B-scan (depth attenuation plus multiplicative
//! speckle) or as a three-channel stain-like image.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor, LabeledSample, SegmentationMask};
use crate::seed::{derive_seed, rng_for, tag};

/// Speckle draws beyond this many standard deviations are rejected.
const SPECKLE_TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub boundary1_mean: f64,
    pub boundary2_mean: f64,
    pub boundary_wobble_amp: f64,
    /// Cycles per image width.
    pub boundary_wobble_freq: f64,
    /// Radians; shared by both interfaces so they stay parallel.
    pub wobble_phase: f64,
    /// Exponential decay per pixel of depth.
    pub oct_attenuation_coeff: f64,
    pub speckle_strength: f64,
    pub layer_reflectivity: [f64; 3],
    pub stain_palette: [[f64; 3]; 3],
    /// Amplitude of both the per-pixel color jitter and the smooth texture field.
    pub color_jitter: f64,
}

impl PhantomSpec {
    /// Flat, noise-free phantom with evenly spaced interfaces.
    pub fn flat(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            boundary1_mean: 1.0 / 3.0,
            boundary2_mean: 2.0 / 3.0,
            boundary_wobble_amp: 0.0,
            boundary_wobble_freq: 1.0,
            wobble_phase: 0.0,
            oct_attenuation_coeff: 0.0,
            speckle_strength: 0.0,
            layer_reflectivity: [0.85, 0.35, 0.6],
            stain_palette: [[0.93, 0.62, 0.76], [0.80, 0.30, 0.50], [0.62, 0.48, 0.78]],
            color_jitter: 0.0,
        }
    }

    /// Row index of both interfaces at column `x`, before validation.
    pub fn boundary_rows(&self, x: usize) -> (i64, i64) {
        let wobble = self.boundary_wobble_amp
            * (2.0 * PI * self.boundary_wobble_freq * x as f64 / self.width as f64 + self.wobble_phase).sin();
        let h = self.height as f64;
        (
            (h * (self.boundary1_mean + wobble)).round() as i64,
            (h * (self.boundary2_mean + wobble)).round() as i64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Err(Error::validation("phantom spec", reason));
        if self.height < 3 || self.width < 1 {
            return err(format!("size {}×{} too small", self.height, self.width));
        }
        if !(0.0 < self.boundary1_mean && self.boundary1_mean < self.boundary2_mean && self.boundary2_mean < 1.0) {
            return err(format!(
                "boundary means must satisfy 0 < {} < {} < 1",
                self.boundary1_mean, self.boundary2_mean
            ));
        }
        if self.boundary_wobble_amp < 0.0 || !self.boundary_wobble_freq.is_finite() {
            return err("wobble amplitude must be ≥ 0 with finite frequency".into());
        }
        if self.oct_attenuation_coeff < 0.0 || self.speckle_strength < 0.0 || self.color_jitter < 0.0 {
            return err("attenuation, speckle and jitter must be ≥ 0".into());
        }
        if self.layer_reflectivity.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return err(format!(
                "layer reflectivities {:?} must lie in (0, 1]",
                self.layer_reflectivity
            ));
        }
        if self.stain_palette.iter().flatten().any(|&v| !(0.0..=1.0).contains(&v)) {
            return err("stain palette entries must lie in [0, 1]".into());
        }
        let h = self.height as i64;
        for x in 0..self.width {
            let (b1, b2) = self.boundary_rows(x);
            if !(1 <= b1 && b1 < b2 && b2 <= h - 1) {
                return err(format!(
                    "interfaces at column {x} are rows {b1} and {b2}; need 1 ≤ b1 < b2 ≤ {}",
                    h - 1
                ));
            }
        }
        Ok(())
    }
}

pub fn rasterize_layers(spec: &PhantomSpec) -> Result<SegmentationMask> {
    spec.validate()?;
    let mut mask = SegmentationMask::filled(spec.height, spec.width, 0);
    for x in 0..spec.width {
        let (b1, b2) = spec.boundary_rows(x);
        for r in 0..spec.height {
            let r_i = r as i64;
            let class = if r_i < b1 {
                0
            } else if r_i < b2 {
                1
            } else {
                2
            };
            mask.set(r, x, class);
        }
    }
    Ok(mask)
}

/// Zero-mean, unit-scale truncated Gaussian draws in row-major pixel order.
pub fn speckle_field(spec: &PhantomSpec) -> Vec<f64> {
    let mut rng = rng_for(spec.seed, &[tag::SPECKLE]);
    (0..spec.height * spec.width)
        .map(|_| loop {
            let g: f64 = StandardNormal.sample(&mut rng);
            if g.abs() <= SPECKLE_TRUNCATION {
                break g;
            }
        })
        .collect()
}

fn check_mask(spec: &PhantomSpec, mask: &SegmentationMask) -> Result<()> {
    if (mask.height(), mask.width()) != (spec.height, spec.width) {
        return Err(Error::shape(
            "phantom mask",
            (spec.height, spec.width),
            (mask.height(), mask.width()),
        ));
    }
    if let Some(m) = mask.max_class().filter(|&m| m > 2) {
        return Err(Error::validation("phantom mask", format!("class id {m} out of range")));
    }
    Ok(())
}

/// Depth-attenuated reflectivity with multiplicative speckle, clipped to [0, 1].
/// Depth is measured from the top row, which is the tissue surface.
pub fn render_oct(spec: &PhantomSpec, mask: &SegmentationMask) -> Result<ImageTensor> {
    spec.validate()?;
    check_mask(spec, mask)?;
    let noise = speckle_field(spec);
    let mut img = ImageTensor::zeros(1, spec.height, spec.width);
    for r in 0..spec.height {
        let decay = (-spec.oct_attenuation_coeff * r as f64).exp();
        for c in 0..spec.width {
            let base = spec.layer_reflectivity[mask.get(r, c) as usize] * decay;
            let v = base * (1.0 + spec.speckle_strength * noise[r * spec.width + c]);
            img.set(0, r, c, v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(img)
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

/// Palette color per class, plus per-pixel uniform jitter and a smooth
/// low-frequency brightness field, both bounded by `color_jitter`.
pub fn render_histology(spec: &PhantomSpec, mask: &SegmentationMask) -> Result<ImageTensor> {
    spec.validate()?;
    check_mask(spec, mask)?;
    let (h, w) = (spec.height, spec.width);
    let mut img = ImageTensor::zeros(3, h, w);
    let amp = spec.color_jitter;
    if amp == 0.0 {
        for r in 0..h {
            for c in 0..w {
                let color = spec.stain_palette[mask.get(r, c) as usize];
                for (ch, &v) in color.iter().enumerate() {
                    img.set(ch, r, c, v as f32);
                }
            }
        }
        return Ok(img);
    }

    let mut trng = rng_for(spec.seed, &[tag::STAIN_TEXTURE]);
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fy: trng.random_range(0.5..3.0),
            fx: trng.random_range(0.5..3.0),
            phase: trng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let mut jrng = rng_for(spec.seed, &[tag::STAIN_JITTER]);
    for r in 0..h {
        for c in 0..w {
            let texture = amp / waves.len() as f64
                * waves
                    .iter()
                    .map(|wv| (2.0 * PI * (wv.fy * r as f64 / h as f64 + wv.fx * c as f64 / w as f64) + wv.phase).sin())
                    .sum::<f64>();
            let color = spec.stain_palette[mask.get(r, c) as usize];
            for (ch, &base) in color.iter().enumerate() {
                let jitter: f64 = jrng.random_range(-amp..=amp);
                img.set(ch, r, c, (base + texture + jitter).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(img)
}

pub fn render(spec: &PhantomSpec, domain: Domain) -> Result<LabeledSample> {
    let mask = rasterize_layers(spec)?;
    let image = match domain {
        Domain::Oct => render_oct(spec, &mask)?,
        Domain::Histology => render_histology(spec, &mask)?,
    };
    LabeledSample::new(image, mask, domain)
}

/// Distribution of random phantom specs for a given image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSampler {
    pub height: usize,
    pub width: usize,
    pub boundary1_mean: (f64, f64),
    pub boundary2_mean: (f64, f64),
    pub wobble_amp: (f64, f64),
    pub wobble_freq: (f64, f64),
    /// Fraction of the signal that survives to the bottom row.
    pub oct_depth_survival: (f64, f64),
    pub speckle_strength: (f64, f64),
    pub reflectivity: [f64; 3],
    pub reflectivity_spread: f64,
    pub palette: [[f64; 3]; 3],
    pub palette_spread: f64,
    pub color_jitter: f64,
}

impl PhantomSampler {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            boundary1_mean: (0.22, 0.36),
            boundary2_mean: (0.55, 0.72),
            wobble_amp: (0.0, 0.05),
            wobble_freq: (0.5, 2.0),
            oct_depth_survival: (0.25, 0.6),
            speckle_strength: (0.1, 0.3),
            reflectivity: [0.85, 0.35, 0.65],
            reflectivity_spread: 0.05,
            palette: [[0.93, 0.62, 0.76], [0.80, 0.30, 0.50], [0.62, 0.48, 0.78]],
            palette_spread: 0.03,
            color_jitter: 0.02,
        }
    }

    pub fn sample(&self, seed: u64) -> PhantomSpec {
        let mut rng = rng_for(seed, &[tag::SPEC]);
        let mut draw = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let survival = draw(self.oct_depth_survival);
        let spec_base = PhantomSpec {
            seed,
            height: self.height,
            width: self.width,
            boundary1_mean: draw(self.boundary1_mean),
            boundary2_mean: draw(self.boundary2_mean),
            boundary_wobble_amp: draw(self.wobble_amp),
            boundary_wobble_freq: draw(self.wobble_freq),
            wobble_phase: draw((0.0, 2.0 * PI)),
            oct_attenuation_coeff: -survival.ln() / self.height.max(1) as f64,
            speckle_strength: draw(self.speckle_strength),
            layer_reflectivity: [0.0; 3],
            stain_palette: [[0.0; 3]; 3],
            color_jitter: self.color_jitter,
        };
        let rs = self.reflectivity_spread;
        let ps = self.palette_spread;
        let mut spec = spec_base;
        for k in 0..3 {
            spec.layer_reflectivity[k] = (self.reflectivity[k] + draw((-rs, rs))).clamp(0.01, 1.0);
            for ch in 0..3 {
                spec.stain_palette[k][ch] = (self.palette[k][ch] + draw((-ps, ps))).clamp(0.0, 1.0);
            }
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub mask_path: PathBuf,
    pub domain: Domain,
    pub seed: u64,
    pub spec: PhantomSpec,
}

/// A JSON-lines sample listing. Paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for rec in &self.records {
            let line = serde_json::to_string(rec).expect("manifest record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }

    pub fn load_sample(&self, rec: &ManifestRecord) -> Result<LabeledSample> {
        let image = ImageTensor::load_png(&self.resolve(&rec.path))?;
        let mask = SegmentationMask::load_png(&self.resolve(&rec.mask_path))?;
        if image.channels() != rec.domain.channels() {
            return Err(Error::format(
                self.resolve(&rec.path),
                format!(
                    "{} image must have {} channel(s), found {}",
                    rec.domain.name(),
                    rec.domain.channels(),
                    image.channels()
                ),
            ));
        }
        LabeledSample::new(image, mask, rec.domain).map_err(|e| Error::format(self.resolve(&rec.mask_path), e))
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Per-sample seeds for both domains; no seed is shared across domains.
pub fn sample_seeds(root_seed: u64, n_oct: usize, n_hist: usize) -> (Vec<u64>, Vec<u64>) {
    let mut used = HashSet::new();
    let mut take = |domain_tag: u64, i: usize| {
        let mut salt = 0;
        loop {
            let s = derive_seed(root_seed, &[domain_tag, i as u64, salt]);
            if used.insert(s) {
                return s;
            }
            salt += 1;
        }
    };
    let oct = (0..n_oct).map(|i| take(tag::OCT_SAMPLE, i)).collect();
    let hist = (0..n_hist).map(|i| take(tag::HIST_SAMPLE, i)).collect();
    (oct, hist)
}

/// Renders `n_oct` OCT and `n_hist` histology phantoms from independent
/// specs into `out_dir` and writes `manifest.jsonl` beside them.
pub fn generate_dataset(
    n_oct: usize,
    n_hist: usize,
    sampler: &PhantomSampler,
    root_seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    for sub in ["oct", "histology"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (oct_seeds, hist_seeds) = sample_seeds(root_seed, n_oct, n_hist);
    let jobs: Vec<(Domain, usize, u64)> = oct_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| (Domain::Oct, i, s))
        .chain(hist_seeds.iter().enumerate().map(|(i, &s)| (Domain::Histology, i, s)))
        .collect();

    let records = jobs
        .par_iter()
        .map(|&(domain, i, seed)| {
            let spec = sampler.sample(seed);
            let sample = render(&spec, domain)?;
            let (dir, stem) = match domain {
                Domain::Oct => ("oct", format!("oct_{i:05}")),
                Domain::Histology => ("histology", format!("hist_{i:05}")),
            };
            let path = PathBuf::from(dir).join(format!("{stem}.png"));
            let mask_path = PathBuf::from(dir).join(format!("{stem}_mask.png"));
            sample.image.save_png(&out_dir.join(&path))?;
            sample.mask.save_png(&out_dir.join(&mask_path))?;
            Ok(ManifestRecord {
                path,
                mask_path,
                domain,
                seed,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
