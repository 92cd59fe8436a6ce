//! The six networks: two generators, two structure heads, two discriminators.

pub mod conv;
pub mod discriminator;
pub mod generator;
pub mod head;
pub mod layers;
pub mod params;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use head::StructureHead;
pub use params::Params;

use crate::error::Result;
use crate::image::NUM_LAYER_CLASSES;
use crate::seed::{rng_for, tag};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub gen_base_width: usize,
    pub n_resblocks: usize,
    pub n_down: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    pub n_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            gen_base_width: 64,
            n_resblocks: 5,
            n_down: 3,
            disc_base_width: 64,
            disc_layers: 4,
            n_classes: NUM_LAYER_CLASSES,
        }
    }
}

impl NetworkConfig {
    pub fn generator_oh(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 1,
            out_channels: 3,
            base_width: self.gen_base_width,
            n_resblocks: self.n_resblocks,
            n_down: self.n_down,
        }
    }

    pub fn generator_ho(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 1,
            ..self.generator_oh()
        }
    }

    pub fn discriminator(&self, in_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels,
            base_width: self.disc_base_width,
            n_layers: self.disc_layers,
        }
    }
}

/// Which side of the minmax game a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Generators and structure heads.
    Generator,
    Discriminator,
}

#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetworkConfig,
    /// OCT → histology.
    pub g_oh: Generator,
    /// Histology → OCT.
    pub g_ho: Generator,
    /// Reads `g_oh` embeddings of OCT inputs.
    pub head_oh: StructureHead,
    /// Reads `g_ho` embeddings of histology inputs.
    pub head_ho: StructureHead,
    pub d_h: Discriminator,
    pub d_o: Discriminator,
}

pub const NETWORK_NAMES: [&str; 6] = ["g_oh", "g_ho", "head_oh", "head_ho", "d_h", "d_o"];

impl Networks {
    /// Deterministic Gaussian initialization; each network draws from its
    /// own stream so adding a network does not perturb the others.
    pub fn init(config: NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let rng = |i: u64| rng_for(seed, &[tag::INIT, i]);
        let g_oh = Generator::new(config.generator_oh(), dtype, device, &mut rng(0))?;
        let g_ho = Generator::new(config.generator_ho(), dtype, device, &mut rng(1))?;
        let emb = config.generator_oh().embedding_channels();
        Ok(Self {
            head_oh: StructureHead::new(emb, config.n_classes, dtype, device, &mut rng(2))?,
            head_ho: StructureHead::new(emb, config.n_classes, dtype, device, &mut rng(3))?,
            d_h: Discriminator::new(config.discriminator(3), dtype, device, &mut rng(4))?,
            d_o: Discriminator::new(config.discriminator(1), dtype, device, &mut rng(5))?,
            g_oh,
            g_ho,
            config,
        })
    }

    fn parts(&self) -> [(&'static str, &Params); 6] {
        [
            ("g_oh", self.g_oh.params()),
            ("g_ho", self.g_ho.params()),
            ("head_oh", self.head_oh.params()),
            ("head_ho", self.head_ho.params()),
            ("d_h", self.d_h.params()),
            ("d_o", self.d_o.params()),
        ]
    }

    fn side_of(name: &str) -> Side {
        if name.starts_with("d_") {
            Side::Discriminator
        } else {
            Side::Generator
        }
    }

    /// All parameters with `network.param` names, in a stable order.
    pub fn named_vars(&self) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        for (prefix, p) in self.parts() {
            p.merge_into(prefix, &mut out);
        }
        out
    }

    pub fn side_vars(&self, side: Side) -> BTreeMap<String, Var> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| Self::side_of(k) == side)
            .collect()
    }

    pub fn fingerprint(&self, side: Side) -> Result<u64> {
        let vars = self.side_vars(side);
        params::fingerprint(vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let vars = self.named_vars();
        params::save_tensors(stem, vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    /// Loads a checkpoint into config-shaped networks, validating every shape.
    pub fn load(config: NetworkConfig, stem: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let nets = Self::init(config, 0, dtype, device)?;
        let loaded = params::load_tensors(stem, device)?;
        let origin = params::blob_paths(stem).0;
        for (prefix, p) in nets.parts() {
            p.assign_from(&loaded, prefix, &origin)?;
        }
        Ok(nets)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = self.clone();
        *out.g_oh.params_mut() = self.g_oh.params().deep_clone()?;
        *out.g_ho.params_mut() = self.g_ho.params().deep_clone()?;
        *out.head_oh.params_mut() = self.head_oh.params().deep_clone()?;
        *out.head_ho.params_mut() = self.head_ho.params().deep_clone()?;
        *out.d_h.params_mut() = self.d_h.params().deep_clone()?;
        *out.d_o.params_mut() = self.d_o.params().deep_clone()?;
        Ok(out)
    }
}

/// Snapshot of tensor values, used to compare parameter states.
pub fn snapshot(vars: &BTreeMap<String, Var>) -> Result<BTreeMap<String, Vec<f32>>> {
    vars.iter()
        .map(|(k, v)| {
            let t: &Tensor = v.as_tensor();
            Ok((k.clone(), t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
        })
        .collect()
}
