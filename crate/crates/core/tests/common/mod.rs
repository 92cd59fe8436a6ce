//! Shared helpers for the integration tests: scalar reference
//! implementations, finite differences and tiny fixtures.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coronagan::image::Domain;
use coronagan::phantom::{generate_dataset, Manifest, PhantomSampler};
use coronagan::training::TrainingConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

// ---- scalar-loop loss oracles ----

pub fn ref_adv_g(scores: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in scores {
        s += (x - 1.0) * (x - 1.0);
    }
    s / scores.len() as f64
}

pub fn ref_adv_d(real: &[f64], fake: &[f64]) -> f64 {
    let mut r = 0.0;
    for &x in real {
        r += (x - 1.0) * (x - 1.0);
    }
    let mut f = 0.0;
    for &x in fake {
        f += x * x;
    }
    0.5 * r / real.len() as f64 + 0.5 * f / fake.len() as f64
}

pub fn ref_mean_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Cross-entropy of NCHW logits against NHW labels via an explicit
/// per-pixel softmax.
pub fn ref_cross_entropy(logits: &[f64], labels: &[u32], n: usize, c: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let at = |k: usize| logits[((b * c + k) * h + y) * w + x];
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(at(k));
                }
                let mut z = 0.0;
                for k in 0..c {
                    z += (at(k) - m).exp();
                }
                let label = labels[(b * h + y) * w + x] as usize;
                total += -((at(label) - m).exp() / z).ln();
            }
        }
    }
    total / (n * h * w) as f64
}

// ---- finite differences ----

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    /// Largest relative error among the compared entries.
    pub worst: f64,
    pub at: String,
    pub checked: usize,
    /// Entries excluded because a ReLU or |·| kink lies within ±eps.
    pub kinks: usize,
}

impl GradReport {
    pub fn merge(&mut self, label: &str, other: GradReport) {
        if other.worst > self.worst {
            self.worst = other.worst;
            self.at = format!("{label}: {}", other.at);
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Compares analytic partial derivatives of `f` with central differences
/// over up to `per_tensor` entries of each var. The relative-error
/// denominator is floored at `floor` so vanishing partials are judged by
/// absolute error. With `kink_tol`, entries whose forward and backward
/// one-sided slopes disagree by more than that fraction are counted as
/// kinks and skipped, since no finite difference is meaningful there.
pub fn grad_check(
    vars: &[(String, Var)],
    f: &dyn Fn() -> Tensor,
    eps: f64,
    per_tensor: usize,
    floor: f64,
    kink_tol: Option<f64>,
    seed: u64,
) -> GradReport {
    let loss = f();
    let f0 = scalar(&loss);
    let grads = loss.backward().unwrap();
    let mut r = rng(seed);
    let mut out = GradReport::default();
    for (name, var) in vars {
        let n = var.elem_count();
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let analytic = flat(g);
        let base = flat(var.as_tensor());
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            var.set(&tensor(&v, var.dims())).unwrap();
            let plus = scalar(&f());
            v[i] = base[i] - eps;
            var.set(&tensor(&v, var.dims())).unwrap();
            let minus = scalar(&f());
            var.set(&tensor(&base, var.dims())).unwrap();
            if let Some(tol) = kink_tol {
                let (fwd, bwd) = ((plus - f0) / eps, (f0 - minus) / eps);
                if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(floor) {
                    out.kinks += 1;
                    continue;
                }
            }
            out.checked += 1;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
            if rel > out.worst {
                out.worst = rel;
                out.at = format!("{name}[{i}]: analytic {:.6e} numeric {numeric:.6e}", analytic[i]);
            }
        }
    }
    out
}

// ---- fixtures ----

/// Small phantom dataset of `n` images per domain.
pub fn phantom_manifest(dir: &Path, n: usize, side: usize, seed: u64) -> Manifest {
    generate_dataset(n, n, &PhantomSampler::new(side, side), seed, dir).unwrap()
}

/// Tiny but complete training config for fast runs on `side`-pixel patches.
pub fn tiny_config(side: usize, epochs: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs,
        batch_size: 4,
        seed,
        checkpoint_every: 1,
        patch_size: side,
        gen_base_width: 4,
        n_resblocks: 2,
        disc_base_width: 8,
        disc_layers: 2,
        ..Default::default()
    }
}

pub fn domain_count(m: &Manifest, d: Domain) -> usize {
    m.domain(d).count()
}
