//! Host-side image and label containers plus their PNG encodings.
//!
//! Images are stored channel-major (`c × h × w`) with intensities in the unit
//! interval. On disk they are 8-bit PNGs quantized with `round(255·v)`; masks
//! are single-channel PNGs holding raw class ids.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of coronary layer classes (intima, media, adventitia).
pub const NUM_LAYER_CLASSES: usize = 3;

/// Class id reserved for background when the background flag is enabled.
pub const BACKGROUND_CLASS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "OCT")]
    Oct,
    #[serde(rename = "HISTOLOGY")]
    Histology,
}

impl Domain {
    pub fn channels(self) -> usize {
        match self {
            Domain::Oct => 1,
            Domain::Histology => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Oct => "OCT",
            Domain::Histology => "HISTOLOGY",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "ImageTensor::from_vec",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f32) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height {
                let src = (c * self.height + row + r) * self.width + col;
                let dst = (c * height + r) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn in_unit_interval(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `1 × c × h × w` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `c × h × w` or `1 × c × h × w`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::shape("ImageTensor::from_tensor", "(1, c, h, w)", t.dims())),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c, h, w, data)
    }

    /// Stacks equally-sized images into a `n × c × h × w` tensor.
    pub fn stack(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::validation("batch", "empty image list"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::shape("ImageTensor::stack", first.dims(), img.dims()));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), first.channels, first.height, first.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
        let (h, w) = (self.height as u32, self.width as u32);
        let res = match self.channels {
            1 => GrayImage::from_fn(w, h, |x, y| Luma([q(self.get(0, y as usize, x as usize))])).save(path),
            3 => RgbImage::from_fn(w, h, |x, y| {
                let (r, c) = (y as usize, x as usize);
                Rgb([q(self.get(0, r, c)), q(self.get(1, r, c)), q(self.get(2, r, c))])
            })
            .save(path),
            n => {
                return Err(Error::validation(
                    "image",
                    format!("cannot encode {n}-channel image as PNG"),
                ))
            }
        };
        res.map_err(|e| Error::format(path, e))
    }

    /// Reads an 8-bit PNG. Grayscale files load as 1 channel, color files as 3.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let out = if img.color().has_color() {
            let rgb = img.to_rgb8();
            let mut t = Self::zeros(3, h, w);
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    t.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
                }
            }
            t
        } else {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Self::from_vec(1, h, w, data)?
        };
        Ok(out)
    }

    /// Lays images side by side (left to right), replicating grayscale to RGB.
    pub fn montage(images: &[&ImageTensor]) -> Result<Self> {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut out = Self::zeros(3, height, width);
        let mut x0 = 0;
        for img in images {
            for c in 0..3 {
                let src_c = if img.channels == 1 { 0 } else { c };
                for r in 0..img.height {
                    for x in 0..img.width {
                        out.set(c, r, x0 + x, img.get(src_c, r, x));
                    }
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}

/// Per-pixel layer labels, row-major `h × w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("SegmentationMask::from_vec", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        Self { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &v in &self.data {
            if (v as usize) < n_classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Reduces the mask by an integer factor. `Nearest` takes the label at
    /// the centre of each `factor × factor` cell; `Majority` takes the most
    /// frequent label in the cell (ties resolved to the smaller id).
    pub fn downsample(&self, factor: usize, mode: Downsample) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::validation(
                "downsample factor",
                format!("{factor} does not divide {}×{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::filled(h, w, 0);
        for r in 0..h {
            for c in 0..w {
                let v = match mode {
                    Downsample::Nearest => self.get(r * factor + factor / 2, c * factor + factor / 2),
                    Downsample::Majority => {
                        let mut counts = [0usize; 256];
                        for rr in r * factor..(r + 1) * factor {
                            for cc in c * factor..(c + 1) * factor {
                                counts[self.get(rr, cc) as usize] += 1;
                            }
                        }
                        let best = counts.iter().copied().max().unwrap_or(0);
                        counts.iter().position(|&n| n == best).unwrap_or(0) as u8
                    }
                };
                out.set(r, c, v);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("mask buffer length matches dims");
        img.save(path).map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?;
        if img.color().has_color() {
            return Err(Error::format(path, "mask PNG must be single-channel"));
        }
        let g = img.to_luma8();
        Self::from_vec(g.height() as usize, g.width() as usize, g.into_raw())
    }

    /// Stacks masks into a `n × h × w` u32 tensor.
    pub fn stack(masks: &[&SegmentationMask], device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::validation("batch", "empty mask list"))?;
        let mut data = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::shape(
                    "SegmentationMask::stack",
                    (first.height, first.width),
                    (m.height, m.width),
                ));
            }
            data.extend(m.data.iter().map(|&v| v as u32));
        }
        Ok(Tensor::from_vec(
            data,
            (masks.len(), first.height, first.width),
            device,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsample {
    #[default]
    Nearest,
    Majority,
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub mask: SegmentationMask,
    pub domain: Domain,
}

impl LabeledSample {
    pub fn new(image: ImageTensor, mask: SegmentationMask, domain: Domain) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                "LabeledSample",
                (image.height(), image.width()),
                (mask.height(), mask.width()),
            ));
        }
        if image.channels() != domain.channels() {
            return Err(Error::shape(
                format!("{} sample channels", domain.name()),
                domain.channels(),
                image.channels(),
            ));
        }
        Ok(Self { image, mask, domain })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_takes_cell_centre() {
        let mut m = SegmentationMask::filled(4, 4, 0);
        m.set(1, 1, 2);
        m.set(3, 3, 1);
        let d = m.downsample(2, Downsample::Nearest).unwrap();
        assert_eq!(d.data(), &[2, 0, 0, 1]);
    }

    #[test]
    fn majority_downsample_counts_votes() {
        let m = SegmentationMask::from_vec(2, 2, vec![1, 1, 2, 0]).unwrap();
        assert_eq!(m.downsample(2, Downsample::Majority).unwrap().data(), &[1]);
        assert!(m.downsample(3, Downsample::Nearest).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_vec(3, 2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p).unwrap();
        assert_eq!(back.dims(), (3, 2, 2));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let mask = SegmentationMask::from_vec(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let mp = dir.path().join("m.png");
        mask.save_png(&mp).unwrap();
        assert_eq!(SegmentationMask::load_png(&mp).unwrap(), mask);
    }

    #[test]
    fn sample_rejects_mismatched_mask() {
        let img = ImageTensor::zeros(1, 4, 4);
        let mask = SegmentationMask::filled(4, 5, 0);
        assert!(LabeledSample::new(img, mask, Domain::Oct).is_err());
    }
}
