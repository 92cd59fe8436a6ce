use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LoaderConfig;
use crate::error::{Error, Result};
use crate::image::{Downsample, NUM_LAYER_CLASSES};
use crate::losses::LossWeights;
use crate::nn::NetworkConfig;

/// Every training hyperparameter in one flat record. Serialized as flat
/// TOML (`key = value` lines); unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_every: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    pub patch_size: usize,
    pub flip_prob: f64,

    pub gen_base_width: usize,
    pub n_resblocks: usize,
    pub n_down: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    /// Reserves class id 3 for background and gives the heads a 4th output.
    pub background_class: bool,
    pub label_downsample: Downsample,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Size of the discriminator replay pool of past fakes; 0 disables it.
    pub replay_pool_size: usize,
}

impl Default for TrainingConfig {
    /// Desk-scale defaults; paper-scale runs override `patch_size`,
    /// `gen_base_width`, `disc_base_width` and `epochs`.
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_initial: 1e-4,
            lr_decay_every: 2,
            alpha: 10.0,
            beta: 5.0,
            gamma: 5.0,
            seed: 0,
            checkpoint_every: 10,
            out_dir: None,
            patch_size: 64,
            flip_prob: 0.5,
            gen_base_width: 8,
            n_resblocks: 5,
            n_down: 3,
            disc_base_width: 16,
            disc_layers: 4,
            background_class: false,
            label_downsample: Downsample::Nearest,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            replay_pool_size: 0,
        }
    }
}

impl TrainingConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            gen_base_width: self.gen_base_width,
            n_resblocks: self.n_resblocks,
            n_down: self.n_down,
            disc_base_width: self.disc_base_width,
            disc_layers: self.disc_layers,
            n_classes: NUM_LAYER_CLASSES + usize::from(self.background_class),
        }
    }

    pub fn loader(&self) -> LoaderConfig {
        LoaderConfig {
            patch_size: self.patch_size,
            batch_size: self.batch_size,
            flip_prob: self.flip_prob,
            shuffle_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::validation("training config", reason));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be > 0, got {}", self.lr_initial));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.lr_decay_every == 0 || self.checkpoint_every == 0 {
            return bad("lr_decay_every and checkpoint_every must be ≥ 1".into());
        }
        self.weights().validate()?;
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        let scale = 1usize << self.n_down.min(16);
        let d_scale = 1usize << self.disc_layers.min(16);
        if self.patch_size % scale != 0 || self.patch_size % d_scale != 0 || self.patch_size < 2 * d_scale {
            return bad(format!(
                "patch_size {} must be a multiple of {scale} (generator) and {d_scale} (discriminator), and ≥ {}",
                self.patch_size,
                2 * d_scale
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::validation("training config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
