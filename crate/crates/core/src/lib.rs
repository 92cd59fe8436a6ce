//! Structure-constrained unpaired translation between OCT B-scans and
//! stain-like histology images, with synthetic phantom data and a
//! perceptual-hash similarity evaluator.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
