//! Whole-image translation of PNG files with a trained checkpoint.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::translate;
use crate::image::{Domain, ImageTensor};
use crate::nn::Networks;

/// Image sides must be multiples of this (three stride-2 stages).
pub const SIDE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    OctToHistology,
    HistologyToOct,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::OctToHistology => Domain::Oct,
            Direction::HistologyToOct => Domain::Histology,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Direction::OctToHistology => "virtual_histology",
            Direction::HistologyToOct => "virtual_oct",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::OctToHistology => "o2h",
            Direction::HistologyToOct => "h2o",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o2h" | "o->h" | "oct2hist" => Ok(Direction::OctToHistology),
            "h2o" | "h->o" | "hist2oct" => Ok(Direction::HistologyToOct),
            _ => Err(Error::validation("direction", format!("`{s}` (expected o2h or h2o)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub direction: Direction,
    /// Also write `input | output` side by side.
    pub montage: bool,
    /// Edge-pad inputs up to a multiple of 8 and crop the result back
    /// instead of rejecting them.
    pub pad_to_multiple: bool,
}

fn padded_side(n: usize) -> usize {
    n.div_ceil(SIDE_MULTIPLE) * SIDE_MULTIPLE
}

/// Pads bottom and right by replicating the last row and column.
pub fn pad_to_multiple(image: &ImageTensor) -> ImageTensor {
    let (c, h, w) = image.dims();
    let (hp, wp) = (padded_side(h), padded_side(w));
    let mut out = ImageTensor::zeros(c, hp, wp);
    for ch in 0..c {
        for r in 0..hp {
            for x in 0..wp {
                out.set(ch, r, x, image.get(ch, r.min(h - 1), x.min(w - 1)));
            }
        }
    }
    out
}

/// Translates one in-memory image, checking the channel and size contract.
pub fn translate_image(nets: &Networks, image: &ImageTensor, opts: &InferOptions) -> Result<ImageTensor> {
    let want = opts.direction.source().channels();
    let (c, h, w) = image.dims();
    if c != want {
        return Err(Error::validation(
            "input",
            format!("{} expects {want}-channel images, got {c}", opts.direction),
        ));
    }
    let aligned = h % SIDE_MULTIPLE == 0 && w % SIDE_MULTIPLE == 0;
    if !aligned && !opts.pad_to_multiple {
        return Err(Error::validation(
            "input",
            format!("{h}x{w} is not divisible by {SIDE_MULTIPLE}; rerun with --pad-to-multiple"),
        ));
    }
    let g = match opts.direction {
        Direction::OctToHistology => &nets.g_oh,
        Direction::HistologyToOct => &nets.g_ho,
    };
    if aligned {
        translate(g, image)
    } else {
        Ok(translate(g, &pad_to_multiple(image))?.crop(0, 0, h, w))
    }
}

/// Translates each PNG in `inputs` into `out_dir`; returns written paths.
pub fn infer(nets: &Networks, inputs: &[PathBuf], out_dir: &Path, opts: &InferOptions) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for input in inputs {
        let image = ImageTensor::load_png(input)?;
        let out = translate_image(nets, &image, opts).map_err(|e| match e {
            Error::Validation { reason, .. } => Error::format(input, reason),
            e => e,
        })?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = out_dir.join(format!("{stem}_{}.png", opts.direction.suffix()));
        out.save_png(&path)?;
        written.push(path);
        if opts.montage {
            let path = out_dir.join(format!("{stem}_montage.png"));
            ImageTensor::montage(&[&image, &out])?.save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_parsing() {
        assert_eq!("O2H".parse::<Direction>().unwrap(), Direction::OctToHistology);
        assert_eq!("h2o".parse::<Direction>().unwrap(), Direction::HistologyToOct);
        assert!("x".parse::<Direction>().is_err());
    }

    #[test]
    fn edge_padding_replicates_border() {
        let img = ImageTensor::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_to_multiple(&img);
        assert_eq!(p.dims(), (1, 8, 8));
        assert_eq!(p.get(0, 7, 7), 6.0);
        assert_eq!(p.get(0, 0, 5), 3.0);
        assert_eq!(p.crop(0, 0, 2, 3), img);
    }
}
