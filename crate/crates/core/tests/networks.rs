mod common;

use candle_core::{DType, Device, Tensor};

use coronagan::nn::layers::softmax_channels;
use coronagan::nn::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NetworkConfig, Networks};
use coronagan::seed::rng_for;

fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = common::rng(seed);
    let v = common::uniform(&[1, c, h, w], 0.0, 1.0, &mut r);
    Tensor::from_vec(
        v.iter().map(|&x| x as f32).collect::<Vec<_>>(),
        (1, c, h, w),
        &Device::Cpu,
    )
    .unwrap()
}

fn small_nets(base: usize) -> Networks {
    let cfg = NetworkConfig {
        gen_base_width: base,
        n_resblocks: 2,
        disc_base_width: 8,
        ..Default::default()
    };
    Networks::init(cfg, 3, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn paper_size_embedding_geometry() {
    let g = GeneratorConfig::oct_to_histology(64);
    assert_eq!(g.embedding_shape(288, 288), (512, 36, 36));
    assert_eq!(GeneratorConfig::oct_to_histology(8).embedding_shape(64, 64), (64, 8, 8));
    assert_eq!(DiscriminatorConfig::new(3, 64).output_side(288), 17);
}

#[test]
fn generators_map_between_channel_counts() {
    let nets = small_nets(4);
    for (h, w) in [(64, 64), (48, 80), (288, 288)] {
        let (fake_h, emb) = nets.g_oh.forward(&input(1, h, w, 1)).unwrap();
        assert_eq!(fake_h.dims(), &[1, 3, h, w]);
        assert_eq!(emb.dims(), &[1, 32, h / 8, w / 8]);
        let logits = nets.head_oh.forward(&emb).unwrap();
        assert_eq!(logits.dims(), &[1, 3, h / 8, w / 8]);
        let (fake_o, _) = nets.g_ho.forward(&fake_h).unwrap();
        assert_eq!(fake_o.dims(), &[1, 1, h, w]);
        let v = common::flat(&fake_o);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn generator_rejects_bad_inputs() {
    let nets = small_nets(4);
    assert!(nets.g_oh.forward(&input(1, 60, 64, 0)).is_err());
    assert!(nets.g_oh.forward(&input(3, 64, 64, 0)).is_err());
    assert!(nets.g_ho.forward(&input(1, 64, 64, 0)).is_err());
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let cfg = GeneratorConfig::oct_to_histology(4);
    let g = Generator::new(cfg, DType::F32, &Device::Cpu, &mut rng_for(1, &[])).unwrap();
    for i in 0..cfg.n_resblocks {
        for what in ["weight", "bias"] {
            let name = format!("res.{i}.conv2.{what}");
            let t = g.params().get(&name).unwrap().zeros_like().unwrap();
            g.params().set(&name, &t).unwrap();
        }
    }
    let h = g.encoder(&input(1, 32, 32, 2)).unwrap();
    let out = g.trunk(&h).unwrap();
    assert_eq!(common::flat(&out), common::flat(&h));
}

#[test]
fn head_probabilities_are_normalized() {
    let nets = small_nets(4);
    let (_, emb) = nets.g_oh.forward(&input(1, 32, 32, 4)).unwrap();
    let p = softmax_channels(&nets.head_oh.forward(&emb).unwrap()).unwrap();
    let s = common::flat(&p.sum(1).unwrap());
    assert!(s.iter().all(|&x| (x - 1.0).abs() < 1e-5));

    // Zero weights and bias give uniform class probabilities.
    for name in ["weight", "bias"] {
        let t = nets.head_oh.params().get(name).unwrap().zeros_like().unwrap();
        nets.head_oh.params().set(name, &t).unwrap();
    }
    let p = softmax_channels(&nets.head_oh.forward(&emb).unwrap()).unwrap();
    assert!(common::flat(&p).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
}

fn discriminator(c: usize, n_layers: usize) -> Discriminator {
    let cfg = DiscriminatorConfig {
        in_channels: c,
        base_width: 8,
        n_layers,
    };
    Discriminator::new(cfg, DType::F32, &Device::Cpu, &mut rng_for(5, &[])).unwrap()
}

#[test]
fn discriminator_score_grid_sizes() {
    let d = discriminator(3, 4);
    assert_eq!(d.forward(&input(3, 288, 288, 0)).unwrap().dims(), &[1, 1, 17, 17]);
    assert_eq!(d.forward(&input(3, 64, 64, 0)).unwrap().dims(), &[1, 1, 3, 3]);
    assert!(d.forward(&input(3, 16, 16, 0)).is_err());
    assert!(d.forward(&input(1, 64, 64, 0)).is_err());
}

/// An image with period equal to the total stride scores the same in every
/// cell that does not see the zero padding.
#[test]
fn discriminator_is_translation_equivariant_in_the_interior() {
    let d = discriminator(1, 4);
    let tile = common::uniform(&[16, 16], 0.0, 1.0, &mut common::rng(8));
    let side = 256;
    let v: Vec<f32> = (0..side * side)
        .map(|i| tile[(i / side % 16) * 16 + i % side % 16] as f32)
        .collect();
    let x = Tensor::from_vec(v, (1, 1, side, side), &Device::Cpu).unwrap();
    let s = d.forward(&x).unwrap();
    let n = s.dim(2).unwrap();
    let grid = common::flat(&s);
    let centre = grid[(n / 2) * n + n / 2];
    for r in 4..n - 4 {
        for c in 4..n - 4 {
            assert!((grid[r * n + c] - centre).abs() < 1e-4, "cell ({r},{c})");
        }
    }
}

#[test]
fn zero_discriminator_emits_its_bias() {
    let d = discriminator(3, 2);
    for name in d.params().names().map(String::from).collect::<Vec<_>>() {
        let t = d.params().get(&name).unwrap();
        let z = if name == "score.bias" {
            Tensor::full(0.7f32, t.dims(), &Device::Cpu).unwrap()
        } else {
            t.zeros_like().unwrap()
        };
        d.params().set(&name, &z).unwrap();
    }
    let s = d.forward(&input(3, 32, 32, 1)).unwrap();
    assert!(common::flat(&s).iter().all(|&x| (x - 0.7).abs() < 1e-6));
}

#[test]
fn initialization_is_seeded() {
    let cfg = NetworkConfig {
        gen_base_width: 4,
        n_resblocks: 1,
        disc_base_width: 4,
        disc_layers: 2,
        ..Default::default()
    };
    let a = Networks::init(cfg, 11, DType::F32, &Device::Cpu).unwrap();
    let b = Networks::init(cfg, 11, DType::F32, &Device::Cpu).unwrap();
    let c = Networks::init(cfg, 12, DType::F32, &Device::Cpu).unwrap();
    for side in [coronagan::nn::Side::Generator, coronagan::nn::Side::Discriminator] {
        assert_eq!(a.fingerprint(side).unwrap(), b.fingerprint(side).unwrap());
        assert_ne!(a.fingerprint(side).unwrap(), c.fingerprint(side).unwrap());
    }
}

#[test]
fn saved_networks_reload_bit_identically() {
    let nets = small_nets(4);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("nets");
    nets.save(&stem).unwrap();
    let back = Networks::load(nets.config, &stem, DType::F32, &Device::Cpu).unwrap();
    let x = input(1, 32, 32, 9);
    let a = nets
        .g_oh
        .forward(&x)
        .unwrap()
        .0
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let b = back
        .g_oh
        .forward(&x)
        .unwrap()
        .0
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

    let other = NetworkConfig {
        gen_base_width: 8,
        ..nets.config
    };
    let err = Networks::load(other, &stem, DType::F32, &Device::Cpu)
        .unwrap_err()
        .to_string();
    assert!(err.contains("g_oh"), "{err}");
}
