//! Alternating minmax optimization of the six networks.
//!
//! Each step first updates both generators and both structure heads on the
//! weighted generator objective with the discriminators held fixed, then
//! updates both discriminators on real images versus detached fakes.

pub mod config;
pub mod log;
pub mod metrics;
pub mod optim;
pub mod pool;
pub mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use config::TrainingConfig;
pub use log::{read_loss_log, LossLog, LossRecord};
pub use optim::Adam;
pub use pool::ImagePool;
pub use schedule::lr_schedule;

use crate::dataset::{Loader, UnpairedBatch};
use crate::error::{Error, Result};
use crate::image::{Downsample, ImageTensor, SegmentationMask};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, coronary_loss, cycle_loss, embedding_loss, scalar, total_generator_loss,
    weighted_generator_objective, LossBreakdown, LossParts, LossWeights,
};
use crate::nn::{params, Networks, Side};
use crate::phantom::Manifest;
use crate::seed::rng_for;

const POOL_TAG: u64 = 11;

/// Device tensors for one unpaired batch, with labels reduced to the
/// embedding resolution.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub oct: Tensor,
    pub hist: Tensor,
    pub oct_labels: Tensor,
    pub hist_labels: Tensor,
}

impl BatchTensors {
    pub fn new(
        oct: &[&ImageTensor],
        oct_masks: &[&SegmentationMask],
        hist: &[&ImageTensor],
        hist_masks: &[&SegmentationMask],
        label_factor: usize,
        mode: Downsample,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if oct.len() != hist.len() {
            return Err(Error::shape("unpaired batch halves", oct.len(), hist.len()));
        }
        let down = |ms: &[&SegmentationMask]| -> Result<Tensor> {
            let small = ms
                .iter()
                .map(|m| m.downsample(label_factor, mode))
                .collect::<Result<Vec<_>>>()?;
            SegmentationMask::stack(&small.iter().collect::<Vec<_>>(), device)
        };
        Ok(Self {
            oct: ImageTensor::stack(oct, dtype, device)?,
            hist: ImageTensor::stack(hist, dtype, device)?,
            oct_labels: down(oct_masks)?,
            hist_labels: down(hist_masks)?,
        })
    }

    pub fn from_batch(
        batch: &UnpairedBatch,
        label_factor: usize,
        mode: Downsample,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let oct: Vec<_> = batch.oct.iter().map(|p| &p.image).collect();
        let oct_masks: Vec<_> = batch.oct.iter().map(|p| &p.mask).collect();
        let hist: Vec<_> = batch.hist.iter().map(|p| &p.image).collect();
        let hist_masks: Vec<_> = batch.hist.iter().map(|p| &p.mask).collect();
        Self::new(&oct, &oct_masks, &hist, &hist_masks, label_factor, mode, dtype, device)
    }
}

/// Differentiable generator-side terms of one forward sweep.
pub struct GeneratorTerms {
    pub fake_h: Tensor,
    pub fake_o: Tensor,
    pub adv_g_oh: Tensor,
    pub adv_g_ho: Tensor,
    pub cycle: Tensor,
    pub embedding: Tensor,
    pub coronary: Tensor,
    pub total: Tensor,
}

/// Runs both translation cycles, the structure heads and the discriminators
/// on the fakes, and assembles the weighted objective.
pub fn generator_terms(nets: &Networks, batch: &BatchTensors, weights: &LossWeights) -> Result<GeneratorTerms> {
    let (fake_h, emb_o) = nets.g_oh.forward(&batch.oct)?;
    let (rec_o, emb_of_fake_h) = nets.g_ho.forward(&fake_h)?;
    let (fake_o, emb_h) = nets.g_ho.forward(&batch.hist)?;
    let (rec_h, emb_of_fake_o) = nets.g_oh.forward(&fake_o)?;

    let adv_g_oh = adversarial_loss_g(&nets.d_h.forward(&fake_h)?)?;
    let adv_g_ho = adversarial_loss_g(&nets.d_o.forward(&fake_o)?)?;
    let cycle = cycle_loss(&batch.oct, &rec_o, &batch.hist, &rec_h)?;
    let embedding = embedding_loss(&emb_of_fake_h, &emb_o, &emb_of_fake_o, &emb_h)?;
    let coronary = coronary_loss(
        &nets.head_oh.forward(&emb_o)?,
        &batch.oct_labels,
        &nets.head_ho.forward(&emb_h)?,
        &batch.hist_labels,
    )?;
    let total = weighted_generator_objective(&adv_g_oh, &adv_g_ho, &cycle, &embedding, &coronary, weights)?;
    Ok(GeneratorTerms {
        fake_h,
        fake_o,
        adv_g_oh,
        adv_g_ho,
        cycle,
        embedding,
        coronary,
        total,
    })
}

/// Loss values without any update (discriminator terms use the given fakes).
pub fn evaluate_losses(nets: &Networks, batch: &BatchTensors, weights: &LossWeights) -> Result<LossBreakdown> {
    let g = generator_terms(nets, batch, weights)?;
    let d_h = adversarial_loss_d(&nets.d_h.forward(&batch.hist)?, &nets.d_h.forward(&g.fake_h.detach())?)?;
    let d_o = adversarial_loss_d(&nets.d_o.forward(&batch.oct)?, &nets.d_o.forward(&g.fake_o.detach())?)?;
    Ok(total_generator_loss(
        &LossParts {
            adv_g_oh: scalar(&g.adv_g_oh)?,
            adv_g_ho: scalar(&g.adv_g_ho)?,
            adv_d_h: scalar(&d_h)?,
            adv_d_o: scalar(&d_o)?,
            cycle: scalar(&g.cycle)?,
            embedding: scalar(&g.embedding)?,
            coronary: scalar(&g.coronary)?,
        },
        weights,
    ))
}

fn ensure_finite(l: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    match l.first_non_finite() {
        Some((term, value)) => Err(Error::NonFinite {
            term,
            value,
            epoch,
            step,
        }),
        None => Ok(()),
    }
}

/// Networks plus everything else needed to continue training exactly.
pub struct TrainState {
    pub config: TrainingConfig,
    pub nets: Networks,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub pool_h: ImagePool,
    pub pool_o: ImagePool,
    /// Number of completed epochs, i.e. the next epoch to run.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: TrainingConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let nets = Networks::init(config.network(), config.seed, dtype, device)?;
        Ok(Self {
            opt_g: Adam::new(config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(config.adam_beta1, config.adam_beta2),
            pool_h: ImagePool::new(config.replay_pool_size),
            pool_o: ImagePool::new(config.replay_pool_size),
            nets,
            config,
            epoch: 0,
        })
    }

    pub fn label_factor(&self) -> usize {
        1 << self.config.n_down
    }

    /// One alternating update. Returns the losses measured before it.
    pub fn train_step(&mut self, batch: &BatchTensors, lr: f64, epoch: usize, step: usize) -> Result<LossBreakdown> {
        let weights = self.config.weights();
        let g_vars = self.nets.side_vars(Side::Generator);
        let d_vars = self.nets.side_vars(Side::Discriminator);

        let g = generator_terms(&self.nets, batch, &weights)?;
        let mut parts = LossParts {
            adv_g_oh: scalar(&g.adv_g_oh)?,
            adv_g_ho: scalar(&g.adv_g_ho)?,
            cycle: scalar(&g.cycle)?,
            embedding: scalar(&g.embedding)?,
            coronary: scalar(&g.coronary)?,
            ..Default::default()
        };
        ensure_finite(&total_generator_loss(&parts, &weights), epoch, step)?;
        let g_grads = g.total.backward()?;
        self.opt_g.step(&g_vars, &g_grads, lr)?;

        let pool_rng = |domain: u64| rng_for(self.config.seed, &[POOL_TAG, epoch as u64, step as u64, domain]);
        let fake_h = self.pool_h.query(&g.fake_h.detach(), &mut pool_rng(0))?;
        let fake_o = self.pool_o.query(&g.fake_o.detach(), &mut pool_rng(1))?;
        let d_h = adversarial_loss_d(&self.nets.d_h.forward(&batch.hist)?, &self.nets.d_h.forward(&fake_h)?)?;
        let d_o = adversarial_loss_d(&self.nets.d_o.forward(&batch.oct)?, &self.nets.d_o.forward(&fake_o)?)?;
        parts.adv_d_h = scalar(&d_h)?;
        parts.adv_d_o = scalar(&d_o)?;
        let losses = total_generator_loss(&parts, &weights);
        ensure_finite(&losses, epoch, step)?;
        let d_grads = (d_h + d_o)?.backward()?;
        self.opt_d.step(&d_vars, &d_grads, lr)?;
        Ok(losses)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }
}

pub const NETWORKS_STEM: &str = "networks";
pub const OPTIMIZER_STEM: &str = "optimizer";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateRecord {
    epoch: usize,
    seed: u64,
    adam_g_steps: u64,
    adam_d_steps: u64,
    pool_h_len: usize,
    pool_o_len: usize,
}

/// Writes networks, optimizer moments, replay pools, the epoch counter and
/// the config into `dir`. All random streams are derived from
/// `(seed, epoch, step)`, so the epoch counter captures the RNG state.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.nets.save(&dir.join(NETWORKS_STEM))?;
    let mut opt: Vec<(String, Tensor)> = state.opt_g.state_tensors("adam_g");
    opt.extend(state.opt_d.state_tensors("adam_d"));
    for (name, pool) in [("pool_h", &state.pool_h), ("pool_o", &state.pool_o)] {
        opt.extend(
            pool.images()
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("{name}.{i:05}"), t.clone())),
        );
    }
    params::save_tensors(&dir.join(OPTIMIZER_STEM), opt.iter().map(|(k, t)| (k.as_str(), t)))?;
    let record = StateRecord {
        epoch: state.epoch,
        seed: state.config.seed,
        adam_g_steps: state.opt_g.steps_taken(),
        adam_d_steps: state.opt_d.steps_taken(),
        pool_h_len: state.pool_h.len(),
        pool_o_len: state.pool_o.len(),
    };
    let sp = dir.join(STATE_FILE);
    fs::write(&sp, serde_json::to_string_pretty(&record).expect("state serializes")).map_err(|e| Error::io(&sp, e))?;
    let cp = dir.join(CONFIG_FILE);
    fs::write(&cp, state.config.to_toml_string()).map_err(|e| Error::io(&cp, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<TrainState> {
    let config = TrainingConfig::load(&dir.join(CONFIG_FILE))?;
    let sp = dir.join(STATE_FILE);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let record: StateRecord = serde_json::from_str(&text).map_err(|e| Error::format(&sp, e))?;
    let nets = Networks::load(config.network(), &dir.join(NETWORKS_STEM), dtype, device)?;
    let saved = params::load_tensors(&dir.join(OPTIMIZER_STEM), device)?;
    let mut state = TrainState {
        opt_g: Adam::new(config.adam_beta1, config.adam_beta2),
        opt_d: Adam::new(config.adam_beta1, config.adam_beta2),
        pool_h: ImagePool::new(config.replay_pool_size),
        pool_o: ImagePool::new(config.replay_pool_size),
        nets,
        epoch: record.epoch,
        config,
    };
    let g_vars: BTreeMap<String, Var> = state.nets.side_vars(Side::Generator);
    let d_vars = state.nets.side_vars(Side::Discriminator);
    state.opt_g.restore("adam_g", record.adam_g_steps, &saved, &g_vars)?;
    state.opt_d.restore("adam_d", record.adam_d_steps, &saved, &d_vars)?;
    for (name, len, pool) in [
        ("pool_h", record.pool_h_len, &mut state.pool_h),
        ("pool_o", record.pool_o_len, &mut state.pool_o),
    ] {
        let images = (0..len)
            .map(|i| {
                let key = format!("{name}.{i:05}");
                saved
                    .get(&key)
                    .ok_or_else(|| Error::format(dir, format!("missing replay image `{key}`")))
                    .and_then(|t| Ok(t.to_dtype(dtype)?))
            })
            .collect::<Result<Vec<_>>>()?;
        pool.restore(images);
    }
    Ok(state)
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_LOG_FILE: &str = "losses.csv";

pub fn checkpoint_dir(out_dir: &Path, epochs_done: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epochs_done:05}"))
}

/// Most advanced complete checkpoint under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(out_dir.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(STATE_FILE).is_file())
        .filter_map(|p| {
            let n = p.file_name()?.to_str()?.strip_prefix("epoch_")?.parse::<usize>().ok()?;
            Some((n, p))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop (after checkpointing) once this many epochs are complete, as if
    /// the run were interrupted. The schedule still spans `config.epochs`.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

/// Trains from scratch (or from the latest checkpoint with `resume`) and
/// returns the directory of the last checkpoint written.
pub fn train(config: &TrainingConfig, manifest: &Manifest, out_dir: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let dtype = DType::F32;

    let mut state = match latest_checkpoint(out_dir).filter(|_| opts.resume) {
        Some(dir) => {
            let mut s = load_checkpoint(&dir, dtype, &device)?;
            if s.config.network() != config.network() {
                return Err(Error::validation(
                    "resume",
                    format!("{} was trained with a different network config", dir.display()),
                ));
            }
            s.config = config.clone();
            if opts.verbose {
                eprintln!("resuming from {} (epoch {})", dir.display(), s.epoch);
            }
            s
        }
        None => TrainState::new(config.clone(), dtype, &device)?,
    };

    let loader = Loader::new(manifest, config.loader())?;
    let mut log = LossLog::open(&out_dir.join(LOSS_LOG_FILE), state.epoch)?;
    let factor = state.label_factor();
    let last_epoch = opts.stop_after.unwrap_or(config.epochs).min(config.epochs);
    let mut last_ckpt = latest_checkpoint(out_dir).filter(|_| opts.resume);

    for epoch in state.epoch..last_epoch {
        let lr = lr_schedule(config, epoch)?;
        let mut sum = LossBreakdown::default();
        let mut n = 0usize;
        for (step, batch) in loader.epoch(epoch).enumerate() {
            let bt = BatchTensors::from_batch(&batch, factor, config.label_downsample, dtype, &device)?;
            let l = state.train_step(&bt, lr, epoch, step)?;
            log.push(&LossRecord::new(epoch, step, lr, &l))?;
            sum.total_g += l.total_g;
            sum.cycle += l.cycle;
            sum.coronary += l.coronary;
            n += 1;
        }
        state.epoch = epoch + 1;
        if opts.verbose {
            let k = n.max(1) as f64;
            eprintln!(
                "epoch {:>4}/{}  lr {:.3e}  total_g {:.4}  cycle {:.4}  coronary {:.4}",
                epoch + 1,
                config.epochs,
                lr,
                sum.total_g / k,
                sum.cycle / k,
                sum.coronary / k
            );
        }
        if state.epoch % config.checkpoint_every == 0 || state.epoch == last_epoch {
            let dir = checkpoint_dir(out_dir, state.epoch);
            save_checkpoint(&state, &dir)?;
            last_ckpt = Some(dir);
        }
    }
    match last_ckpt {
        Some(p) => Ok(p),
        None => {
            let dir = checkpoint_dir(out_dir, state.epoch);
            save_checkpoint(&state, &dir)?;
            Ok(dir)
        }
    }
}

/// Accepts either a checkpoint directory or a training output directory
/// (whose latest checkpoint is used).
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path).ok_or_else(|| {
        Error::Missing(format!(
            "no checkpoint at {}: pass a checkpoint directory or a `coronagan train` output directory",
            path.display()
        ))
    })
}

/// Loads only the networks (and their config) for inference.
pub fn load_networks(path: &Path, dtype: DType, device: &Device) -> Result<(Networks, TrainingConfig)> {
    let dir = resolve_checkpoint(path)?;
    let config = TrainingConfig::load(&dir.join(CONFIG_FILE))?;
    let nets = Networks::load(config.network(), &dir.join(NETWORKS_STEM), dtype, device)?;
    Ok((nets, config))
}
