//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Set `ACCEPTANCE_ONLY=1,3` to run a subset.
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};

use coronagan::evaluation::{phv, phv_from_pooled, pooled_features, FallbackExtractor, FeatureExtractor, PhvReport};
use coronagan::image::{Domain, Downsample, ImageTensor, LabeledSample};
use coronagan::losses::{
    adversarial_loss_d, adversarial_loss_g, coronary_loss, cross_entropy, cycle_loss, embedding_loss,
};
use coronagan::nn::{Generator, NetworkConfig, Networks, Side, StructureHead};
use coronagan::phantom::{generate_dataset, render, PhantomSampler};
use coronagan::seed::rng_for;
use coronagan::training::metrics::{cycle_l1, head_accuracy};
use coronagan::training::{
    generator_terms, latest_checkpoint, load_networks, lr_schedule, read_loss_log, train, BatchTensors, GeneratorTerms,
    TrainOptions, TrainingConfig,
};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative gradient error. Rounding in a loss of
/// order 10 leaves about 1e-10 of noise in a central difference, so
/// partials below this are judged on absolute error instead.
const GRAD_FLOOR: f64 = 1e-4;
/// One-sided slopes differing by more than this fraction mark a kink. A
/// kink shifts the central difference by half that gap, so this must not
/// exceed the tolerance being tested.
const KINK_TOL: f64 = 1e-4;

fn var(shape: &[usize], lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Var {
    Var::from_tensor(&common::tensor(&common::uniform(shape, lo, hi, rng), shape)).unwrap()
}

fn named(vars: &[&Var]) -> Vec<(String, Var)> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| (format!("arg{i}"), (*v).clone()))
        .collect()
}

fn phantom_batch(n: usize, side: usize, seed: u64, dtype: DType) -> BatchTensors {
    let sampler = PhantomSampler::new(side, side);
    let oct: Vec<LabeledSample> = (0..n)
        .map(|i| render(&sampler.sample(seed + i as u64), Domain::Oct).unwrap())
        .collect();
    let hist: Vec<LabeledSample> = (0..n)
        .map(|i| render(&sampler.sample(seed + 500 + i as u64), Domain::Histology).unwrap())
        .collect();
    BatchTensors::new(
        &oct.iter().map(|s| &s.image).collect::<Vec<_>>(),
        &oct.iter().map(|s| &s.mask).collect::<Vec<_>>(),
        &hist.iter().map(|s| &s.image).collect::<Vec<_>>(),
        &hist.iter().map(|s| &s.mask).collect::<Vec<_>>(),
        8,
        Downsample::Nearest,
        dtype,
        &Device::Cpu,
    )
    .unwrap()
}

// ---------------------------------------------------------------- 1

fn grad_criterion() -> Outcome {
    let check = |vars: &[(String, Var)], f: &dyn Fn() -> Tensor, per_tensor: usize, kinks: Option<f64>| {
        common::grad_check(vars, f, EPS, per_tensor, GRAD_FLOOR, kinks, 7)
    };
    let mut free = common::GradReport::default();
    let mut r = common::rng(1);

    // Loss functions on free tensors.
    let s = var(&[2, 1, 3, 3], -1.0, 2.0, &mut r);
    free.merge(
        "adv_g",
        check(&named(&[&s]), &|| adversarial_loss_g(s.as_tensor()).unwrap(), 64, None),
    );
    let (sr, sf) = (
        var(&[2, 1, 3, 3], -1.0, 2.0, &mut r),
        var(&[2, 1, 3, 3], -1.0, 2.0, &mut r),
    );
    free.merge(
        "adv_d",
        check(
            &named(&[&sr, &sf]),
            &|| adversarial_loss_d(sr.as_tensor(), sf.as_tensor()).unwrap(),
            64,
            None,
        ),
    );
    let xs: Vec<Var> = (0..4)
        .map(|i| var(&[2, 1 + 2 * (i / 2), 4, 4], 0.0, 1.0, &mut r))
        .collect();
    free.merge(
        "cycle",
        check(
            &named(&xs.iter().collect::<Vec<_>>()),
            &|| {
                cycle_loss(
                    xs[0].as_tensor(),
                    xs[1].as_tensor(),
                    xs[2].as_tensor(),
                    xs[3].as_tensor(),
                )
                .unwrap()
            },
            64,
            None,
        ),
    );
    let es: Vec<Var> = (0..4).map(|_| var(&[2, 8, 2, 2], -1.0, 1.0, &mut r)).collect();
    free.merge(
        "embedding",
        check(
            &named(&es.iter().collect::<Vec<_>>()),
            &|| {
                embedding_loss(
                    es[0].as_tensor(),
                    es[1].as_tensor(),
                    es[2].as_tensor(),
                    es[3].as_tensor(),
                )
                .unwrap()
            },
            64,
            None,
        ),
    );
    let (lo, lh) = (
        var(&[2, 3, 3, 3], -2.0, 2.0, &mut r),
        var(&[2, 3, 3, 3], -2.0, 2.0, &mut r),
    );
    let yo = Tensor::from_vec((0..18u32).map(|i| i % 3).collect::<Vec<_>>(), (2, 3, 3), &Device::Cpu).unwrap();
    let yh = Tensor::from_vec(
        (0..18u32).map(|i| (i * 2 + 1) % 3).collect::<Vec<_>>(),
        (2, 3, 3),
        &Device::Cpu,
    )
    .unwrap();
    free.merge(
        "coronary",
        check(
            &named(&[&lo, &lh]),
            &|| coronary_loss(lo.as_tensor(), &yo, lh.as_tensor(), &yh).unwrap(),
            64,
            None,
        ),
    );

    // Every term through tiny networks, with respect to network parameters.
    // At 8×8 the bottleneck is a single pixel; the 32×32 run on noise
    // images exercises the encoder too, where ReLU kinks make some entries
    // unmeasurable by finite differences.
    let mut per_size = Vec::new();
    for (side, kinks) in [(8usize, None), (32, Some(KINK_TOL))] {
        let cfg = TrainingConfig {
            patch_size: side,
            gen_base_width: 4,
            n_resblocks: 2,
            disc_base_width: 4,
            disc_layers: 1,
            ..Default::default()
        };
        let nets = Networks::init(cfg.network(), 3, DType::F64, &Device::Cpu).unwrap();
        let mut b = phantom_batch(2, side, 40, DType::F64);
        if side > 8 {
            let mut r = common::rng(5);
            b.oct = common::tensor(
                &common::uniform(&[2, 1, side, side], 0.0, 1.0, &mut r),
                &[2, 1, side, side],
            );
            b.hist = common::tensor(
                &common::uniform(&[2, 3, side, side], 0.0, 1.0, &mut r),
                &[2, 3, side, side],
            );
        }
        let w = cfg.weights();
        let g_vars: Vec<(String, Var)> = nets.side_vars(Side::Generator).into_iter().collect();
        let d_vars: Vec<(String, Var)> = nets.side_vars(Side::Discriminator).into_iter().collect();
        let terms: [(&str, fn(GeneratorTerms) -> Tensor); 6] = [
            ("adv_g_oh", |t| t.adv_g_oh),
            ("adv_g_ho", |t| t.adv_g_ho),
            ("cycle", |t| t.cycle),
            ("embedding", |t| t.embedding),
            ("coronary", |t| t.coronary),
            ("total_g", |t| t.total),
        ];
        let mut rep = common::GradReport::default();
        for (name, pick) in terms {
            let f = || pick(generator_terms(&nets, &b, &w).unwrap());
            rep.merge(name, check(&g_vars, &f, 4, kinks));
        }
        let fake_h = nets.g_oh.forward(&b.oct).unwrap().0.detach();
        let f =
            || adversarial_loss_d(&nets.d_h.forward(&b.hist).unwrap(), &nets.d_h.forward(&fake_h).unwrap()).unwrap();
        rep.merge("adv_d_h", check(&d_vars, &f, 4, kinks));
        ensure!(
            rep.worst < GRAD_TOL,
            "{side}×{side} nets: relative error {:.3e} at {}",
            rep.worst,
            rep.at
        );
        per_size.push(format!(
            "{side}×{side} nets {:.1e} over {} entries ({} at kinks skipped)",
            rep.worst, rep.checked, rep.kinks
        ));
    }
    ensure!(
        free.worst < GRAD_TOL,
        "loss functions: relative error {:.3e} at {}",
        free.worst,
        free.at
    );
    Ok(format!(
        "max relative error: loss functions {:.1e}; {}",
        free.worst,
        per_size.join("; ")
    ))
}

// ---------------------------------------------------------------- 2

fn oracle_criterion() -> Outcome {
    let mut r = common::rng(2);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = 1 + trial % 3;
        let k = 2 + trial % 4;
        let shape = [n, 1, k, k];
        let a = common::uniform(&shape, -2.0, 2.0, &mut r);
        let b = common::uniform(&shape, -2.0, 2.0, &mut r);
        let (ta, tb) = (common::tensor(&a, &shape), common::tensor(&b, &shape));
        worst = worst.max((common::scalar(&adversarial_loss_g(&ta).unwrap()) - common::ref_adv_g(&a)).abs());
        worst = worst.max((common::scalar(&adversarial_loss_d(&ta, &tb).unwrap()) - common::ref_adv_d(&a, &b)).abs());

        let s3 = [n, 3, k, k];
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|i| common::uniform(if i < 2 { &shape } else { &s3 }, 0.0, 1.0, &mut r))
            .collect();
        let t = |i: usize| common::tensor(&xs[i], if i < 2 { &shape } else { &s3 });
        let cyc = common::scalar(&cycle_loss(&t(0), &t(1), &t(2), &t(3)).unwrap());
        worst = worst.max((cyc - common::ref_mean_l1(&xs[1], &xs[0]) - common::ref_mean_l1(&xs[3], &xs[2])).abs());

        let es = [n, 2 + trial % 5, k, k];
        let e: Vec<Vec<f64>> = (0..4).map(|_| common::uniform(&es, -3.0, 3.0, &mut r)).collect();
        let te = |i: usize| common::tensor(&e[i], &es);
        let emb = common::scalar(&embedding_loss(&te(0), &te(1), &te(2), &te(3)).unwrap());
        worst = worst.max((emb - common::ref_mean_l1(&e[0], &e[1]) - common::ref_mean_l1(&e[2], &e[3])).abs());

        let c = 3;
        let logits: Vec<Vec<f64>> = (0..2)
            .map(|_| common::uniform(&[n, c, k, k], -5.0, 5.0, &mut r))
            .collect();
        let labels: Vec<Vec<u32>> = (0..2)
            .map(|_| {
                common::uniform(&[n, k, k], 0.0, 3.0, &mut r)
                    .iter()
                    .map(|&v| v as u32)
                    .collect()
            })
            .collect();
        let tl = |i: usize| common::tensor(&logits[i], &[n, c, k, k]);
        let ty = |i: usize| Tensor::from_slice(&labels[i], (n, k, k), &Device::Cpu).unwrap();
        let ce = common::scalar(&cross_entropy(&tl(0), &ty(0)).unwrap());
        let ce_ref = common::ref_cross_entropy(&logits[0], &labels[0], n, c, k, k);
        worst = worst.max((ce - ce_ref).abs());
        let cor = common::scalar(&coronary_loss(&tl(0), &ty(0), &tl(1), &ty(1)).unwrap());
        let cor_ref = ce_ref + common::ref_cross_entropy(&logits[1], &labels[1], n, c, k, k);
        worst = worst.max((cor - cor_ref).abs());
    }
    ensure!(worst < 1e-6, "largest deviation from scalar reference {worst:.3e}");

    let zeros = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let labels = Tensor::from_vec((0..32u32).map(|i| i % 3).collect::<Vec<_>>(), (2, 4, 4), &Device::Cpu).unwrap();
    let ln3 = 3f64.ln();
    let ce = common::scalar(&cross_entropy(&zeros, &labels).unwrap());
    ensure!((ce - ln3).abs() <= 1e-9, "uniform cross-entropy {ce} != ln 3");
    let cor = common::scalar(&coronary_loss(&zeros, &labels, &zeros, &labels).unwrap());
    ensure!((cor - 2.0 * ln3).abs() <= 2e-9, "uniform coronary loss {cor} != 2 ln 3");
    Ok(format!(
        "max |impl - reference| {worst:.1e} over 50 trials; uniform CE - ln 3 = {:.1e}",
        ce - ln3
    ))
}

// ---------------------------------------------------------------- 3

fn hist_image(seed: u64, side: usize) -> ImageTensor {
    render(&PhantomSampler::new(side, side).sample(seed), Domain::Histology)
        .unwrap()
        .image
}

fn add_noise(x: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    let mut rng = rng_for(seed, &[99]);
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = (*v as f64 + dist.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    y
}

/// Channel means of every stage computed with explicit loops.
fn loop_pooled(ext: &dyn FeatureExtractor, img: &ImageTensor, stage: usize) -> Vec<f64> {
    let f = ext.stages(img).unwrap()[stage - 1]
        .squeeze(0)
        .unwrap()
        .to_vec3::<f32>()
        .unwrap();
    f.iter()
        .map(|ch| {
            let mut s = 0.0f64;
            let mut n = 0usize;
            for row in ch {
                for &v in row {
                    s += v as f64;
                    n += 1;
                }
            }
            s / n as f64
        })
        .collect()
}

fn loop_phv(a: &[f64], b: &[f64], t: f64) -> f64 {
    let mut hits = 0usize;
    for k in 0..a.len() {
        if (a[k] - b[k]).abs() <= t {
            hits += 1;
        }
    }
    100.0 * hits as f64 / a.len() as f64
}

fn phv_criterion() -> Outcome {
    let ext = FallbackExtractor::new(0).unwrap();
    let t = 0.005;
    let images: Vec<ImageTensor> = (0..4).map(|s| hist_image(s, 64)).collect();
    for i in 1..=3 {
        for x in &images {
            let p = phv(x, x, &ext, i, t).unwrap();
            ensure!(p == 100.0, "phv(x, x) = {p} at stage {i}");
        }
        for (a, b) in [(0, 1), (1, 2), (2, 3)] {
            let ab = phv(&images[a], &images[b], &ext, i, t).unwrap();
            let ba = phv(&images[b], &images[a], &ext, i, t).unwrap();
            ensure!(ab == ba, "asymmetric at stage {i}: {ab} vs {ba}");
            let mut last = -1.0;
            for tt in [1e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 1.0] {
                let p = phv(&images[a], &images[b], &ext, i, tt).unwrap();
                ensure!(p >= last, "stage {i}: phv fell to {p} at T = {tt}");
                last = p;
            }
            let (pa, pb) = (
                pooled_features(&ext, &images[a], i).unwrap(),
                pooled_features(&ext, &images[b], i).unwrap(),
            );
            let (la, lb) = (loop_pooled(&ext, &images[a], i), loop_pooled(&ext, &images[b], i));
            let pool_err = pa
                .iter()
                .zip(&la)
                .chain(pb.iter().zip(&lb))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            // Library pooling accumulates in f32.
            ensure!(pool_err < 1e-5, "pooled means differ from loop by {pool_err:.2e}");
            for tt in [1e-3, 5e-3, 2e-2] {
                let lib = phv_from_pooled(&pa, &pb, tt).unwrap();
                ensure!(lib == loop_phv(&pa, &pb, tt), "stage {i}: vectorized {lib} != loop");
            }
        }
    }

    let sigmas = [0.0, 0.05, 0.1, 0.2];
    let mut curves = Vec::new();
    for i in 1..=3 {
        let means: Vec<f64> = sigmas
            .iter()
            .map(|&sigma| {
                (0..10u64)
                    .map(|seed| {
                        let x = hist_image(1000 + seed, 64);
                        phv(&x, &add_noise(&x, sigma, seed), &ext, i, t).unwrap()
                    })
                    .sum::<f64>()
                    / 10.0
            })
            .collect();
        ensure!(
            means.windows(2).all(|w| w[1] <= w[0]),
            "stage {i} noise curve not non-increasing: {means:?}"
        );
        curves.push(format!(
            "stage {i}: {:?}",
            means.iter().map(|m| format!("{m:.1}")).collect::<Vec<_>>()
        ));
    }
    Ok(format!("noise curves {}", curves.join("; ")))
}

// ---------------------------------------------------------------- 4

fn smoke_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sampler = PhantomSampler::new(64, 64);
    let manifest = generate_dataset(200, 200, &sampler, 7, &dir.path().join("data")).unwrap();
    let cfg = TrainingConfig {
        epochs: 50,
        batch_size: 8,
        patch_size: 64,
        gen_base_width: 8,
        seed: 1,
        checkpoint_every: 50,
        ..Default::default()
    };
    let out = dir.path().join("run");
    let start = Instant::now();
    let ckpt = train(&cfg, &manifest, &out, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let log = read_loss_log(&out.join("losses.csv")).unwrap();
    if let Some(r) = log.iter().find(|r| r.breakdown().first_non_finite().is_some()) {
        return Err(format!("non-finite loss at epoch {} step {}", r.epoch, r.step));
    }
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.total_g).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let first = (0..5).map(epoch_mean).sum::<f64>() / 5.0;
    let last = (45..50).map(epoch_mean).sum::<f64>() / 5.0;
    let ratio = last / first;

    let (nets, _) = load_networks(&ckpt, DType::F32, &Device::Cpu).unwrap();
    let held_o: Vec<_> = (0..20)
        .map(|i| render(&sampler.sample(100_000 + i), Domain::Oct).unwrap())
        .collect();
    let held_h: Vec<_> = (0..20)
        .map(|i| render(&sampler.sample(200_000 + i), Domain::Histology).unwrap())
        .collect();
    let acc_o = head_accuracy(&nets.g_oh, &nets.head_oh, &held_o, Downsample::Nearest).unwrap();
    let acc_h = head_accuracy(&nets.g_ho, &nets.head_ho, &held_h, Downsample::Nearest).unwrap();
    let img = |v: &[LabeledSample]| v.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
    let cyc_o = cycle_l1(&nets.g_oh, &nets.g_ho, &img(&held_o)).unwrap();
    let cyc_h = cycle_l1(&nets.g_ho, &nets.g_oh, &img(&held_h)).unwrap();

    let detail = format!(
        "{:.0}s, total_g last5/first5 = {ratio:.3}, head acc O {acc_o:.3} H {acc_h:.3}, cycle L1 O→H→O {cyc_o:.3} H→O→H {cyc_h:.3}",
        elapsed.as_secs_f64()
    );
    ensure!(elapsed < Duration::from_secs(15 * 60), "too slow: {detail}");
    ensure!(ratio <= 0.7, "loss did not fall enough: {detail}");
    ensure!(acc_o >= 0.8 && acc_h >= 0.8, "head accuracy too low: {detail}");
    ensure!(cyc_o <= 0.15 && cyc_h < 0.15, "cycle reconstruction too poor: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn schedule_criterion() -> Outcome {
    for epochs in [1, 2, 3, 10, 50, 10_000] {
        let cfg = TrainingConfig {
            epochs,
            ..Default::default()
        };
        ensure!(
            lr_schedule(&cfg, 0).unwrap() == 1e-4,
            "lr(0) != 1e-4 for {epochs} epochs"
        );
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_schedule(&cfg, e).unwrap()).collect();
        for e in (0..epochs).step_by(2) {
            ensure!(
                e + 1 >= epochs || lrs[e] == lrs[e + 1],
                "lr changes inside window at epoch {e}"
            );
        }
        ensure!(lrs.windows(2).all(|w| w[1] <= w[0]), "lr increases for {epochs} epochs");
    }
    Ok("lr(0) = 1e-4, constant over 2-epoch windows, non-increasing".into())
}

// ---------------------------------------------------------------- 6

fn determinism_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = common::phantom_manifest(&dir.path().join("data"), 6, 32, 3);
    let cfg = common::tiny_config(32, 4, 9);
    let run = |name: &str, opts: &TrainOptions| train(&cfg, &m, &dir.path().join(name), opts).unwrap();
    let a = run("a", &TrainOptions::default());
    run("b", &TrainOptions::default());
    run(
        "c",
        &TrainOptions {
            stop_after: Some(2),
            ..Default::default()
        },
    );
    ensure!(
        latest_checkpoint(&dir.path().join("c"))
            .unwrap()
            .ends_with("epoch_00002"),
        "stop_after ignored"
    );
    let c = run(
        "c",
        &TrainOptions {
            resume: true,
            ..Default::default()
        },
    );

    let csv = |name: &str| std::fs::read(dir.path().join(name).join("losses.csv")).unwrap();
    ensure!(csv("a") == csv("b"), "identical seeds gave different loss logs");
    ensure!(
        csv("a") == csv("c"),
        "train-4 differs from train-2 + resume-2 in the loss log"
    );
    let nets_bytes = |p: &Path| std::fs::read(p.join("networks.bin")).unwrap();
    ensure!(
        nets_bytes(&a) == nets_bytes(&c),
        "train-4 and train-2 + resume-2 end with different weights"
    );

    let (nets, _) = load_networks(&a, DType::F32, &Device::Cpu).unwrap();
    let stem = dir.path().join("copy");
    nets.save(&stem).unwrap();
    let back = Networks::load(nets.config, &stem, DType::F32, &Device::Cpu).unwrap();
    let x = hist_image(5, 32).to_tensor(DType::F32, &Device::Cpu).unwrap();
    let bits = |n: &Networks| -> Vec<u32> {
        let (y, e) = n.g_ho.forward(&x).unwrap();
        let logits = n.head_ho.forward(&e).unwrap();
        [y, e, logits, n.d_h.forward(&x).unwrap()]
            .iter()
            .flat_map(|t| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .map(f32::to_bits)
            .collect()
    };
    ensure!(bits(&nets) == bits(&back), "save/load changed forward outputs");
    Ok("loss CSVs bit-identical across runs and across resume; save/load forward bit-identical".into())
}

// ---------------------------------------------------------------- 7

fn shape_criterion() -> Outcome {
    let d = &Device::Cpu;
    let check = |cfg: NetworkConfig, h: usize, w: usize, seed: u64| -> Outcome {
        let g_oh = Generator::new(cfg.generator_oh(), DType::F32, d, &mut rng_for(seed, &[0])).unwrap();
        let g_ho = Generator::new(cfg.generator_ho(), DType::F32, d, &mut rng_for(seed, &[1])).unwrap();
        let emb_c = cfg.generator_oh().embedding_channels();
        let head = StructureHead::new(emb_c, 3, DType::F32, d, &mut rng_for(seed, &[2])).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 1, h, w), d).unwrap();
        let (y, emb) = g_oh.forward(&x).unwrap();
        ensure!(y.dims() == [1, 3, h, w], "O→H {h}×{w} gave {:?}", y.dims());
        ensure!(
            emb.dims() == [1, emb_c, h / 8, w / 8],
            "embedding {:?} at {h}×{w}",
            emb.dims()
        );
        let logits = head.forward(&emb).unwrap();
        ensure!(
            logits.dims() == [1, 3, h / 8, w / 8],
            "logits {:?} at {h}×{w}",
            logits.dims()
        );
        let (z, emb2) = g_ho.forward(&y).unwrap();
        ensure!(z.dims() == [1, 1, h, w], "H→O {h}×{w} gave {:?}", z.dims());
        ensure!(emb2.dims() == emb.dims(), "H→O embedding {:?}", emb2.dims());
        Ok(String::new())
    };
    check(NetworkConfig::default(), 288, 288, 0)?;
    let small = NetworkConfig {
        gen_base_width: 8,
        n_resblocks: 2,
        ..Default::default()
    };
    let mut r = common::rng(7);
    let mut sizes = Vec::new();
    for k in 0..5 {
        let u = common::uniform(&[2], 2.0, 25.0, &mut r);
        let (h, w) = (8 * u[0] as usize, 8 * u[1] as usize);
        check(small, h, w, k)?;
        sizes.push(format!("{h}×{w}"));
    }
    Ok(format!(
        "288×288 at paper width (embedding 512×36×36); random sizes {}",
        sizes.join(", ")
    ))
}

// ---------------------------------------------------------------- 8

fn cli(args: &[&str], cwd: &Path) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_coronagan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`coronagan {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn cli_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ensure!(
        std::fs::read_dir(p).unwrap().next().is_none(),
        "work directory not empty"
    );
    std::fs::write(p.join("train.toml"), common::tiny_config(32, 2, 0).to_toml_string()).unwrap();
    let printed = cli(
        &[
            "gen-phantoms",
            "--n-oct",
            "4",
            "--n-hist",
            "4",
            "--out",
            "data",
            "--height",
            "32",
            "--width",
            "32",
            "--seed",
            "3",
        ],
        p,
    )?;
    ensure!(printed.contains("seed = 3"), "gen-phantoms did not print its seed");
    let printed = cli(
        &[
            "train",
            "--config",
            "train.toml",
            "--data",
            "data",
            "--out",
            "run",
            "--seed",
            "5",
            "--quiet",
        ],
        p,
    )?;
    ensure!(printed.contains("seed = 5"), "train did not print its resolved seed");
    for out in ["virt", "virt2"] {
        cli(
            &[
                "infer",
                "--checkpoint",
                "run",
                "--input",
                "data/oct",
                "--direction",
                "o2h",
                "--out",
                out,
                "--montage",
            ],
            p,
        )?;
    }
    let virt = p.join("virt/oct_00000_virtual_histology.png");
    ensure!(p.join("virt/oct_00000_montage.png").is_file(), "montage missing");
    ensure!(
        std::fs::read(&virt).unwrap() == std::fs::read(p.join("virt2/oct_00000_virtual_histology.png")).unwrap(),
        "repeated inference differs"
    );
    cli(
        &[
            "evaluate",
            "--checkpoint",
            "run",
            "--data",
            "data",
            "--threshold",
            "0.005",
            "--out",
            "report.json",
            "--extractor",
            "fallback",
        ],
        p,
    )?;
    cli(&["plot-losses", "--losses", "run/losses.csv", "--out", "fig4.svg"], p)?;
    ensure!(p.join("fig4.svg").is_file(), "plot missing");
    let bad = cli(
        &["infer", "--checkpoint", "nowhere", "--input", "data/oct", "--out", "x"],
        p,
    );
    ensure!(
        bad.as_ref().is_err_and(|e| e.contains("error:")),
        "missing checkpoint did not fail cleanly"
    );

    let report: PhvReport = serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    let scores = report.scores();
    ensure!(
        scores.iter().all(|s| (0.0..=100.0).contains(s)),
        "scores out of range: {scores:?}"
    );
    let v = ImageTensor::load_png(&virt).unwrap();
    let ext = FallbackExtractor::new(0).unwrap();
    for i in 1..=3 {
        let same = phv(&v, &v, &ext, i, report.threshold).unwrap();
        ensure!(same == 100.0, "phv on identical images = {same} at stage {i}");
    }
    Ok(format!(
        "report scores {scores:?} over {} pairs; identical pair = 100",
        report.n_pairs
    ))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", grad_criterion),
        (2, "loss-term oracles", oracle_criterion),
        (3, "PHV properties", phv_criterion),
        (4, "smoke training", smoke_criterion),
        (5, "learning-rate schedule", schedule_criterion),
        (6, "determinism and checkpointing", determinism_criterion),
        (7, "shape contracts", shape_criterion),
        (8, "end-to-end CLI", cli_criterion),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // Quiet the default panic message; failures are reported below.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name} [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name} [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
