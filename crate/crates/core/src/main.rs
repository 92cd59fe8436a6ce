use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};

use coronagan::evaluation::{
    evaluate_testset, FallbackExtractor, FeatureExtractor, Pairing, ResNetExtractor, DEFAULT_THRESHOLD, EXTRACTOR_ENV,
    FALLBACK_SEED,
};
use coronagan::inference::{infer, Direction, InferOptions};
use coronagan::phantom::{generate_dataset, Manifest, PhantomSampler, MANIFEST_FILE};
use coronagan::plot::plot_losses;
use coronagan::training::{load_networks, resolve_checkpoint, train, TrainOptions, TrainingConfig};
use coronagan::{Error, Result};

#[derive(Parser)]
#[command(
    name = "coronagan",
    version,
    about = "Structure-constrained OCT <-> histology translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorChoice {
    /// ResNet-101 when CORONAGAN_EXTRACTOR_PATH is set, else the fallback CNN.
    Auto,
    Fallback,
    Resnet101,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic OCT and histology phantoms plus a manifest.
    GenPhantoms {
        #[arg(long)]
        n_oct: usize,
        #[arg(long)]
        n_hist: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 288)]
        height: usize,
        #[arg(long, default_value_t = 288)]
        width: usize,
    },
    /// Train all six networks on an unpaired manifest.
    Train {
        /// TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file, or a directory holding manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many epochs (the schedule still spans the config).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Translate PNG images with a trained checkpoint.
    Infer {
        /// Checkpoint directory or training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG files or directories of PNGs (mask files are skipped).
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// o2h (OCT to histology) or h2o.
        #[arg(long, default_value = "o2h")]
        direction: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write input | output montages.
        #[arg(long)]
        montage: bool,
        /// Edge-pad images whose sides are not multiples of 8.
        #[arg(long)]
        pad_to_multiple: bool,
    },
    /// Score virtual histology against real histology with PHV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest (OCT inputs and real histology).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// mean (all pairs) or best (best match per virtual image).
        #[arg(long, default_value = "mean")]
        pairing: String,
        #[arg(long, value_enum, default_value_t = ExtractorChoice::Auto)]
        extractor: ExtractorChoice,
        /// Seed of the fallback extractor.
        #[arg(long, default_value_t = FALLBACK_SEED)]
        seed: u64,
    },
    /// Draw the two-panel loss curves from a training loss log.
    PlotLosses {
        #[arg(long)]
        losses: PathBuf,
        /// Output figure (.svg or .png).
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".png") && !name.ends_with("_mask.png")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Missing("no input PNG files found".into()));
    }
    Ok(out)
}

fn extractor(choice: ExtractorChoice, seed: u64) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match choice {
        ExtractorChoice::Fallback => Box::new(FallbackExtractor::new(seed)?),
        ExtractorChoice::Resnet101 => Box::new(ResNetExtractor::from_env()?),
        ExtractorChoice::Auto if std::env::var_os(EXTRACTOR_ENV).is_some() => Box::new(ResNetExtractor::from_env()?),
        ExtractorChoice::Auto => {
            eprintln!("note: {EXTRACTOR_ENV} not set; scoring with the seeded fallback extractor");
            Box::new(FallbackExtractor::new(seed)?)
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantoms {
            n_oct,
            n_hist,
            out,
            seed,
            height,
            width,
        } => {
            let sampler = PhantomSampler::new(height, width);
            println!("seed = {seed}");
            println!(
                "sampler = {}",
                serde_json::to_string(&sampler).expect("sampler serializes")
            );
            let m = generate_dataset(n_oct, n_hist, &sampler, seed, &out)?;
            println!(
                "wrote {} samples to {}",
                m.records.len(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
            stop_after,
            quiet,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainingConfig::load(p)?,
                None => TrainingConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.out_dir = Some(out.clone());
            cfg.validate()?;
            println!("# resolved config (seed = {})", cfg.seed);
            print!("{}", cfg.to_toml_string());
            let manifest = Manifest::load(&manifest_path(&data))?;
            let opts = TrainOptions {
                resume,
                stop_after,
                verbose: !quiet,
            };
            let last = train(&cfg, &manifest, &out, &opts)?;
            println!("checkpoint: {}", last.display());
        }
        Command::Infer {
            checkpoint,
            input,
            direction,
            out,
            montage,
            pad_to_multiple,
        } => {
            let opts = InferOptions {
                direction: direction.parse::<Direction>()?,
                montage,
                pad_to_multiple,
            };
            let ckpt = resolve_checkpoint(&checkpoint)?;
            let (nets, cfg) = load_networks(&ckpt, DType::F32, &Device::Cpu)?;
            println!("checkpoint = {} (seed = {})", ckpt.display(), cfg.seed);
            println!(
                "direction = {}, montage = {montage}, pad_to_multiple = {pad_to_multiple}",
                opts.direction
            );
            let written = infer(&nets, &collect_pngs(&input)?, &out, &opts)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            threshold,
            out,
            pairing,
            extractor: choice,
            seed,
        } => {
            let pairing: Pairing = pairing.parse()?;
            let ckpt = resolve_checkpoint(&checkpoint)?;
            let (nets, cfg) = load_networks(&ckpt, DType::F32, &Device::Cpu)?;
            let ext = extractor(choice, seed)?;
            println!(
                "checkpoint = {} (training seed = {}), T = {threshold}, pairing = {pairing}, extractor = {} (seed = {seed})",
                ckpt.display(),
                cfg.seed,
                ext.name()
            );
            let manifest = Manifest::load(&manifest_path(&data))?;
            let report = evaluate_testset(&nets.g_oh, &manifest, ext.as_ref(), threshold, pairing)?;
            report.write(&out)?;
            println!(
                "phv_1 = {:.3}, phv_2 = {:.3}, phv_3 = {:.3} over {} pairs -> {}",
                report.phv_1,
                report.phv_2,
                report.phv_3,
                report.n_pairs,
                out.display()
            );
        }
        Command::PlotLosses { losses, out } => {
            println!("losses = {}, out = {}", losses.display(), out.display());
            plot_losses(&losses, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
