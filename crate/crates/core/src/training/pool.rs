use candle_core::{IndexOp, Tensor};
use rand::Rng;

use crate::error::Result;

/// Replay pool of past generated images fed to a discriminator. Once full,
/// each incoming fake is swapped for a stored one with probability ½.
#[derive(Debug, Clone, Default)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn restore(&mut self, images: Vec<Tensor>) {
        self.images = images;
        self.images.truncate(self.capacity);
    }

    pub fn query<R: Rng>(&mut self, fakes: &Tensor, rng: &mut R) -> Result<Tensor> {
        if self.capacity == 0 {
            return Ok(fakes.clone());
        }
        let mut out = Vec::with_capacity(fakes.dim(0)?);
        for i in 0..fakes.dim(0)? {
            let img = fakes.i(i..i + 1)?.detach();
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random_bool(0.5) {
                let j = rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn disabled_pool_passes_through() {
        let x = Tensor::ones((2, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let mut pool = ImagePool::new(0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = pool.query(&x, &mut rng).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(pool.is_empty());
    }

    #[test]
    fn pool_fills_then_caps() {
        let mut pool = ImagePool::new(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for k in 0..5 {
            let x = (Tensor::ones((2, 1, 2, 2), DType::F32, &Device::Cpu).unwrap() * k as f64).unwrap();
            let y = pool.query(&x, &mut rng).unwrap();
            assert_eq!(y.dims(), &[2, 1, 2, 2]);
        }
        assert_eq!(pool.len(), 3);
    }
}
