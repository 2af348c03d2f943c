use dtcn_core::channel::HopTag;
use dtcn_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use dtcn_core::jscrc::{Mode, Pipeline, PipelineDims};
use dtcn_core::numcore::{Activation, Mlp, Tensor};
use dtcn_core::rng::rng_from;
use dtcn_core::training::{
    bypass_loss, codec_pair_loss, evaluate, train_codec_pair, train_phase1, train_phase2, train_phase3, TrainConfig,
};
use rand::Rng;

fn separable(seed: u64) -> Dataset {
    let mut r = rng_from(seed, &[]);
    let (n, d, t) = (16, 4, 3);
    let mut img = Vec::new();
    let mut txt = Vec::new();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        img.push(sign + 0.3 * r.random_range(-1.0..1.0));
        img.extend((1..d).map(|_| r.random_range(-1.0..1.0)));
        txt.extend((0..t).map(|_| r.random_range(-1.0..1.0)));
    }
    Dataset::new(
        Tensor::new(vec![n, d], img).unwrap(),
        Tensor::new(vec![n, t], txt).unwrap(),
        labels,
        2,
    )
    .unwrap()
}

#[test]
fn one_epoch_on_separable_data_lowers_the_loss() {
    let dims = PipelineDims {
        img_dim: 4,
        txt_dim: 3,
        classes: 2,
        n_sym1: 4,
        n_sym2: 4,
        hidden: 8,
        d_sem: 4,
        d_txt: 2,
        d_fused: 4,
    };
    for seed in 0..5 {
        let data = separable(seed);
        let mut p = Pipeline::new(dims, Mode::Dtcn, seed);
        let cfg = TrainConfig {
            phase_epochs: [1, 0, 0],
            batch_size: 4,
            learning_rates: [0.1, 0.0, 0.0],
            seed,
            ..TrainConfig::default()
        };
        let before = bypass_loss(&p, &data).unwrap();
        train_phase1(&mut p, &data, &cfg).unwrap();
        assert!(bypass_loss(&p, &data).unwrap() < before, "seed {seed}");
    }
}

fn unit_rows(n: usize, width: usize, seed: u64) -> Tensor {
    let mut r = rng_from(seed, &[]);
    let mut t = Tensor::new(
        vec![n, width],
        (0..n * width).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    for i in 0..n {
        let row = t.row_mut(i);
        let s = (row.iter().map(|v| v * v).sum::<f64>() / width as f64).sqrt();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

#[test]
fn near_identity_pair_converges_without_noise() {
    let width = 8;
    let targets = unit_rows(200, width, 3);
    let mut r = rng_from(3, &[1]);
    let mut enc = Mlp::near_identity(width, 0.1, &mut r);
    let mut dec = Mlp::near_identity(width, 0.1, &mut r);
    let cfg = TrainConfig {
        batch_size: 20,
        train_snr_db: 300.0,
        ..TrainConfig::default()
    };
    let losses = train_codec_pair(&mut enc, &mut dec, &targets, HopTag::DeviceToRelay, &cfg, 30, 0.05).unwrap();
    let last = *losses.last().unwrap();
    assert!(last < 0.05, "{last}");
    assert!(codec_pair_loss(&enc, &dec, &targets, HopTag::DeviceToRelay, 300.0, 0).unwrap() < 0.05);
}

#[test]
fn cleaner_channels_reconstruct_better() {
    let (width, hidden, nsym) = (8, 16, 12);
    let mut gap = 0.0;
    for seed in 0..5 {
        let targets = unit_rows(300, width, 10 + seed);
        let loss = |snr: f64| {
            let mut r = rng_from(seed, &[2]);
            let mut enc = Mlp::new(
                &[width, hidden, nsym],
                Activation::Relu,
                Activation::Identity,
                true,
                &mut r,
            );
            let mut dec = Mlp::new(
                &[nsym, hidden, width],
                Activation::Relu,
                Activation::Identity,
                true,
                &mut r,
            );
            let cfg = TrainConfig {
                batch_size: 30,
                train_snr_db: snr,
                seed,
                ..TrainConfig::default()
            };
            train_codec_pair(&mut enc, &mut dec, &targets, HopTag::RelayToReceiver, &cfg, 10, 0.05).unwrap();
            codec_pair_loss(&enc, &dec, &targets, HopTag::RelayToReceiver, snr, seed + 100).unwrap()
        };
        gap += loss(-10.0) - loss(10.0);
    }
    assert!(gap / 5.0 >= 0.0, "mean gap {}", gap / 5.0);
}

#[test]
fn joint_tuning_does_not_hurt_on_average() {
    let (mut after2, mut after3) = (0.0, 0.0);
    for seed in 0..5 {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            train_snr_db: -10.0,
            seed,
            ..TrainConfig::default()
        };
        let mut p = Pipeline::new(PipelineDims::default(), Mode::Dtcn, seed);
        train_phase1(&mut p, &train, &cfg).unwrap();
        train_phase2(&mut p, &train, &cfg).unwrap();
        after2 += evaluate(&p, &test, -10.0, seed).unwrap();
        train_phase3(&mut p, &train, &cfg).unwrap();
        after3 += evaluate(&p, &test, -10.0, seed).unwrap();
    }
    assert!(
        after3 >= after2,
        "phase 3 mean {} vs phase 2 mean {}",
        after3 / 5.0,
        after2 / 5.0
    );
}
