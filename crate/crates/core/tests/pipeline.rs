mod common;

use common::small_dataset;
use dtcn_core::channel::{HopTag, SemanticFrame};
use dtcn_core::data::{generate_synthetic, SyntheticSpec};
use dtcn_core::jscrc::{
    end_to_end, receiver_forward, relay_forward, transmitter_forward, Mode, NoiseKey, Pipeline, PipelineConfig,
    PipelineDims, ReceiverModel, RelayModel,
};
use dtcn_core::numcore::{Activation, Dense, Mlp, Tensor};
use dtcn_core::training::{count_correct, evaluate};
use proptest::prelude::*;

fn single(rows: &[Vec<f64>], bias: Option<Vec<f64>>, act: Activation) -> Mlp {
    Mlp {
        layers: vec![Dense {
            weight: Tensor::from_rows(rows),
            bias: bias.map(Tensor::vector),
            activation: act,
        }],
    }
}

fn unit_power(v: &[f64]) -> Vec<f64> {
    let s = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| x / s).collect()
}

fn tiny_relay() -> RelayModel {
    RelayModel {
        jsc_decoder: Some(single(
            &[vec![1.0, -0.5], vec![0.25, 2.0]],
            Some(vec![0.1, -0.2]),
            Activation::Identity,
        )),
        modb_encoder: Some(single(&[vec![0.5], vec![-1.5]], None, Activation::Tanh)),
        fusion_net: single(
            &[vec![0.3, -0.7], vec![1.1, 0.4], vec![-0.9, 0.6]],
            Some(vec![0.05, -0.1]),
            Activation::Tanh,
        ),
        jsc_encoder2: single(
            &[vec![2.0, -1.0, 0.5], vec![0.5, 1.0, -3.0]],
            Some(vec![0.0, 0.2, -0.1]),
            Activation::Identity,
        ),
    }
}

/// The relay of `tiny_relay` written out by hand for one row.
fn relay_by_hand(s: [f64; 2], t: [f64; 2]) -> Vec<f64> {
    let sem = [s[0] * 1.0 + s[1] * 0.25 + 0.1, s[0] * -0.5 + s[1] * 2.0 - 0.2];
    let txt = (t[0] * 0.5 + t[1] * -1.5).tanh();
    let f = [
        (sem[0] * 0.3 + sem[1] * 1.1 + txt * -0.9 + 0.05).tanh(),
        (sem[0] * -0.7 + sem[1] * 0.4 + txt * 0.6 - 0.1).tanh(),
    ];
    unit_power(&[
        f[0] * 2.0 + f[1] * 0.5,
        -f[0] + f[1] * 1.0 + 0.2,
        f[0] * 0.5 + f[1] * -3.0 - 0.1,
    ])
}

#[test]
fn tiny_relay_matches_hand_forward() {
    let model = tiny_relay();
    let rows = [([0.3, -1.2], [1.0, 0.5]), ([-2.0, 0.7], [-0.4, 2.0])];
    let frame = SemanticFrame::new(
        Tensor::from_rows(&rows.iter().map(|r| r.0.to_vec()).collect::<Vec<_>>()),
        HopTag::DeviceToRelay,
    )
    .unwrap();
    let txt = Tensor::from_rows(&rows.iter().map(|r| r.1.to_vec()).collect::<Vec<_>>());
    let out = relay_forward(Some(&frame), Some(&txt), &model).unwrap();
    assert_eq!(out.hop, HopTag::RelayToReceiver);
    for (i, (s, t)) in rows.iter().enumerate() {
        let expected = relay_by_hand(*s, *t);
        for (a, b) in out.symbols.row(i).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tiny_receiver_matches_hand_forward() {
    let model = ReceiverModel {
        jsc_decoder2: single(
            &[vec![1.0, 0.5], vec![-0.5, 0.25]],
            Some(vec![0.1, 0.0]),
            Activation::Relu,
        ),
        fusion_semantic_decoder: single(
            &[vec![1.0, -1.0, 0.0], vec![2.0, 0.5, -0.5]],
            Some(vec![0.0, 0.1, -0.1]),
            Activation::Identity,
        ),
    };
    let x = [1.2, -0.4];
    let frame = SemanticFrame::new(Tensor::from_rows(&[x.to_vec()]), HopTag::RelayToReceiver).unwrap();
    let logits = receiver_forward(&frame, &model).unwrap();
    let h = [
        (x[0] * 1.0 + x[1] * -0.5 + 0.1).max(0.0),
        (x[0] * 0.5 + x[1] * 0.25).max(0.0),
    ];
    let expected = [h[0] + 2.0 * h[1], -h[0] + 0.5 * h[1] + 0.1, -0.5 * h[1] - 0.1];
    for (a, b) in logits.row(0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let p = logits.softmax_rows();
    assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn noiseless_limit_matches_infinite_snr() {
    let (data, dims) = small_dataset(4, 40);
    let batch = data.all();
    for mode in [Mode::Dtcn, Mode::JsccImageOnly, Mode::JsccTextOnly] {
        let p = Pipeline::new(dims, mode, 4);
        let loud = end_to_end(&batch, &p, &PipelineConfig::new(dims, mode, 300.0), NoiseKey::new(1, 0)).unwrap();
        let clean = end_to_end(&batch, &p, &PipelineConfig::noiseless(dims, mode), NoiseKey::new(1, 0)).unwrap();
        assert!(loud.max_abs_diff(&clean) < 1e-9, "{mode}");
        let again = end_to_end(&batch, &p, &PipelineConfig::new(dims, mode, 300.0), NoiseKey::new(1, 0)).unwrap();
        assert_eq!(loud, again);
    }
}

#[test]
fn untrained_models_are_at_chance_in_deep_noise() {
    let spec = SyntheticSpec::default();
    let (train, test) = generate_synthetic(&spec).unwrap();
    let k = spec.classes as f64;
    for (data, seed) in [(&train, 1), (&test, 2)] {
        let p = Pipeline::new(PipelineDims::default(), Mode::Dtcn, seed);
        let acc = evaluate(&p, data, -10.0, seed).unwrap();
        assert!((acc - 1.0 / k).abs() <= 0.03, "{acc}");
        let img = Pipeline::new(PipelineDims::default(), Mode::JsccImageOnly, seed);
        let acc = evaluate(&img, data, -10.0, seed).unwrap();
        assert!((acc - 1.0 / k).abs() <= 0.03, "{acc}");
    }
}

#[test]
fn constant_prediction_matching_the_labels_is_perfect() {
    let logits = Tensor::from_rows(&vec![vec![0.0, 5.0, 1.0]; 6]);
    assert_eq!(count_correct(&logits, &[1; 6]), 6);
}

proptest! {
    #[test]
    fn frames_have_unit_power(seed in 0u64..500, snr in -10.0f64..20.0) {
        let (data, dims) = small_dataset(seed, 16);
        let p = Pipeline::new(dims, Mode::Dtcn, seed);
        let batch = data.all();
        let f1 = transmitter_forward(&batch.img, p.transmitter.as_ref().unwrap()).unwrap();
        let f2 = relay_forward(Some(&f1), Some(&batch.txt), &p.relay).unwrap();
        for f in [&f1, &f2] {
            for ms in f.row_power() {
                prop_assert!((ms - 1.0).abs() <= 1e-9);
            }
        }
        let logits = end_to_end(&batch, &p, &PipelineConfig::new(dims, Mode::Dtcn, snr), NoiseKey::new(seed, 0)).unwrap();
        prop_assert_eq!(logits.shape(), &[batch.len(), dims.classes]);
    }
}
