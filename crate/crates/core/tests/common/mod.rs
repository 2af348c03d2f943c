//! Checks shared between the per-module integration tests and the acceptance suite.
#![allow(dead_code)]

use dtcn_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use dtcn_core::federated::{run_federated, FederatedConfig, PipelinePhaseTrainer};
use dtcn_core::jscrc::{Mode, Pipeline, PipelineDims};
use dtcn_core::numcore::{dense_forward, Activation, Tape, Tensor, Var};
use dtcn_core::rng::rng_from;
use dtcn_core::scheduler::{apply_transfers, balance_workloads_capped, max_normalized_load, DeviceState};
use dtcn_core::training::{run_phase, EpochWindow, Phase, TrainConfig};
use dtcn_core::{ExecMode, Result};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Builds a scalar loss from the inputs, which are either variables or constants.
pub type Build = fn(&mut Tape, &[Var], &Extra) -> Result<Var>;

/// Fixed, non-differentiated data of one instance.
#[derive(Debug, Clone, Default)]
pub struct Extra {
    pub weights: Option<Tensor>,
    pub labels: Vec<usize>,
    pub factor: f64,
    pub constant: Option<Tensor>,
}

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub extra: Extra,
}

pub struct GradCase {
    pub name: &'static str,
    pub sample: fn(&mut rand_chacha::ChaCha8Rng) -> Instance,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel: f64,
}

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[-hi, -gap] U [gap, hi]`.
fn away_from_zero(r: &mut impl Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    uniform(r, shape, gap, hi).zip_map(&uniform(r, shape, 0.0, 1.0), |v, s| if s < 0.5 { -v } else { v })
}

fn dims(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..=4), r.random_range(1..=5))
}

/// `sum(out * weights)`, so every output entry reaches the loss with its own weight.
fn weighted_sum(t: &mut Tape, out: Var, e: &Extra) -> Result<Var> {
    let w = t.constant(e.weights.clone().expect("weights"));
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn with_weights(r: &mut impl Rng, out_shape: &[usize], inputs: Vec<Tensor>) -> Instance {
    Instance {
        inputs,
        extra: Extra {
            weights: Some(uniform(r, out_shape, -1.0, 1.0)),
            ..Extra::default()
        },
    }
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            sample: |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..=4);
                let a = uniform(r, &[m, k], -1.0, 1.0);
                let b = uniform(r, &[k, n], -1.0, 1.0);
                with_weights(r, &[m, n], vec![a, b])
            },
            build: |t, v, e| {
                let o = t.matmul(v[0], v[1])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "add_bias",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -1.0, 1.0);
                let b = uniform(r, &[n], -1.0, 1.0);
                with_weights(r, &[m, n], vec![x, b])
            },
            build: |t, v, e| {
                let o = t.add_bias(v[0], v[1])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "add",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -1.0, 1.0);
                let y = uniform(r, &[m, n], -1.0, 1.0);
                with_weights(r, &[m, n], vec![x, y])
            },
            build: |t, v, e| {
                let o = t.add(v[0], v[1])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "mul",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -2.0, 2.0);
                let y = uniform(r, &[m, n], -2.0, 2.0);
                with_weights(r, &[m, n], vec![x, y])
            },
            build: |t, v, e| {
                let o = t.mul(v[0], v[1])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "relu",
            sample: |r| {
                let (m, n) = dims(r);
                let x = away_from_zero(r, &[m, n], 0.01, 2.0);
                with_weights(r, &[m, n], vec![x])
            },
            build: |t, v, e| {
                let o = t.relu(v[0])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "tanh",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -3.0, 3.0);
                with_weights(r, &[m, n], vec![x])
            },
            build: |t, v, e| {
                let o = t.tanh(v[0])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "scale",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -1.0, 1.0);
                let mut inst = with_weights(r, &[m, n], vec![x]);
                inst.extra.factor = r.random_range(-3.0..3.0);
                inst
            },
            build: |t, v, e| {
                let o = t.scale(v[0], e.factor)?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "add_constant",
            sample: |r| {
                let (m, n) = dims(r);
                let x = uniform(r, &[m, n], -1.0, 1.0);
                let mut inst = with_weights(r, &[m, n], vec![x]);
                inst.extra.constant = Some(uniform(r, &[m, n], -1.0, 1.0));
                inst
            },
            build: |t, v, e| {
                let o = t.add_constant(v[0], e.constant.as_ref().expect("constant"))?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "concat_cols",
            sample: |r| {
                let (m, n) = dims(r);
                let k = r.random_range(1..=4);
                let a = uniform(r, &[m, n], -1.0, 1.0);
                let b = uniform(r, &[m, k], -1.0, 1.0);
                with_weights(r, &[m, n + k], vec![a, b])
            },
            build: |t, v, e| {
                let o = t.concat_cols(v[0], v[1])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "normalize_power",
            sample: |r| {
                let (m, n) = dims(r);
                let x = away_from_zero(r, &[m, n], 0.2, 2.0);
                with_weights(r, &[m, n], vec![x])
            },
            build: |t, v, e| {
                let o = t.normalize_power(v[0])?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "sum",
            sample: |r| {
                let (m, n) = dims(r);
                Instance {
                    inputs: vec![uniform(r, &[m, n], -1.0, 1.0)],
                    extra: Extra::default(),
                }
            },
            build: |t, v, _| t.sum(v[0]),
        },
        GradCase {
            name: "l1_loss",
            sample: |r| {
                let (m, n) = dims(r);
                let a = uniform(r, &[m, n], -1.0, 1.0);
                let gap = away_from_zero(r, &[m, n], 0.01, 1.0);
                let b = a.zip_map(&gap, |x, g| x + g);
                Instance {
                    inputs: vec![a, b],
                    extra: Extra::default(),
                }
            },
            build: |t, v, _| t.l1_loss(v[0], v[1]),
        },
        GradCase {
            name: "cross_entropy",
            sample: |r| {
                let (m, k) = (r.random_range(1..=5), r.random_range(2..=6));
                let logits = uniform(r, &[m, k], -3.0, 3.0);
                let labels = (0..m).map(|_| r.random_range(0..k)).collect();
                Instance {
                    inputs: vec![logits],
                    extra: Extra {
                        labels,
                        ..Extra::default()
                    },
                }
            },
            build: |t, v, e| t.cross_entropy(v[0], &e.labels),
        },
        GradCase {
            name: "dense_relu",
            sample: |r| loop {
                let (m, i) = dims(r);
                let o = r.random_range(1..=4);
                let x = uniform(r, &[m, i], -1.0, 1.0);
                let w = uniform(r, &[i, o], -1.0, 1.0);
                let b = uniform(r, &[o], -0.5, 0.5);
                let z = dense_forward(&x, &w, &b, Activation::Identity).unwrap();
                if min_abs(&z) > 0.01 {
                    break with_weights(r, &[m, o], vec![x, w, b]);
                }
            },
            build: |t, v, e| {
                let o = dtcn_core::numcore::dense(t, v[0], v[1], Some(v[2]), Activation::Relu)?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "dense_tanh",
            sample: |r| {
                let (m, i) = dims(r);
                let o = r.random_range(1..=4);
                let x = uniform(r, &[m, i], -1.0, 1.0);
                let w = uniform(r, &[i, o], -1.0, 1.0);
                let b = uniform(r, &[o], -0.5, 0.5);
                with_weights(r, &[m, o], vec![x, w, b])
            },
            build: |t, v, e| {
                let o = dtcn_core::numcore::dense(t, v[0], v[1], Some(v[2]), Activation::Tanh)?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "dense_identity_no_bias",
            sample: |r| {
                let (m, i) = dims(r);
                let o = r.random_range(1..=4);
                let x = uniform(r, &[m, i], -1.0, 1.0);
                let w = uniform(r, &[i, o], -1.0, 1.0);
                with_weights(r, &[m, o], vec![x, w])
            },
            build: |t, v, e| {
                let o = dtcn_core::numcore::dense(t, v[0], v[1], None, Activation::Identity)?;
                weighted_sum(t, o, e)
            },
        },
        GradCase {
            name: "mlp_cross_entropy",
            sample: |r| loop {
                let (m, i) = dims(r);
                let (h, k) = (r.random_range(1..=5), r.random_range(2..=4));
                let x = uniform(r, &[m, i], -1.0, 1.0);
                let w1 = uniform(r, &[i, h], -1.0, 1.0);
                let b1 = uniform(r, &[h], -0.5, 0.5);
                let w2 = uniform(r, &[h, k], -1.0, 1.0);
                let b2 = uniform(r, &[k], -0.5, 0.5);
                let z = dense_forward(&x, &w1, &b1, Activation::Identity).unwrap();
                if min_abs(&z) > 0.01 {
                    let labels = (0..m).map(|_| r.random_range(0..k)).collect();
                    break Instance {
                        inputs: vec![x, w1, b1, w2, b2],
                        extra: Extra {
                            labels,
                            ..Extra::default()
                        },
                    };
                }
            },
            build: |t, v, e| {
                let h = dtcn_core::numcore::dense(t, v[0], v[1], Some(v[2]), Activation::Relu)?;
                let o = dtcn_core::numcore::dense(t, h, v[3], Some(v[4]), Activation::Identity)?;
                t.cross_entropy(o, &e.labels)
            },
        },
        GradCase {
            name: "encoder_l1",
            sample: |r| loop {
                let (m, i) = dims(r);
                let o = r.random_range(1..=4);
                let x = uniform(r, &[m, i], -1.0, 1.0);
                let w = uniform(r, &[i, o], -1.0, 1.0);
                let b = uniform(r, &[o], -0.5, 0.5);
                let z = dense_forward(&x, &w, &b, Activation::Identity).unwrap();
                let target = uniform(r, &[m, o], -1.0, 1.0);
                let rms: Vec<f64> = (0..m)
                    .map(|row| (z.row(row).iter().map(|v| v * v).sum::<f64>() / o as f64).sqrt())
                    .collect();
                let y = Tensor::new(
                    z.shape().to_vec(),
                    z.data().iter().enumerate().map(|(j, v)| v / rms[j / o]).collect(),
                )
                .unwrap();
                let gap = y.zip_map(&target, |a, b| (a - b).abs());
                if rms.iter().all(|&s| s > 0.2) && min_abs(&gap) > 0.01 {
                    break Instance {
                        inputs: vec![x, w, b],
                        extra: Extra {
                            constant: Some(target),
                            ..Extra::default()
                        },
                    };
                }
            },
            build: |t, v, e| {
                let z = dtcn_core::numcore::dense(t, v[0], v[1], Some(v[2]), Activation::Identity)?;
                let y = t.normalize_power(z)?;
                let target = t.constant(e.constant.clone().expect("target"));
                t.l1_loss(y, target)
            },
        },
    ]
}

fn loss_at(case: &GradCase, inputs: &[Tensor], extra: &Extra) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let l = (case.build)(&mut t, &vars, extra).unwrap();
    t.value(l).unwrap().item()
}

/// Largest relative error between the tape gradient and central differences
/// over every entry of every input of one instance.
pub fn check_instance(case: &GradCase, inst: &Instance) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|x| t.variable(x.clone())).collect();
    let l = (case.build)(&mut t, &vars, &inst.extra).unwrap();
    let g = t.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .get(*v)
            .unwrap()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inst.inputs[k].shape()));
        for j in 0..inst.inputs[k].len() {
            let mut plus = inst.inputs.clone();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inst.inputs.clone();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (loss_at(case, &plus, &inst.extra) - loss_at(case, &minus, &inst.extra)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradReport> {
    cases()
        .iter()
        .enumerate()
        .map(|(c, case)| {
            let mut r = rng_from(seed, &[c as u64]);
            let worst_rel = (0..instances)
                .map(|_| check_instance(case, &(case.sample)(&mut r)))
                .fold(0.0, f64::max);
            GradReport {
                name: case.name,
                instances,
                worst_rel,
            }
        })
        .collect()
}

pub fn small_dataset(seed: u64, train: usize) -> (Dataset, PipelineDims) {
    let spec = SyntheticSpec {
        img_dim: 12,
        txt_dim: 6,
        classes: 4,
        n_train: train,
        n_test: 40,
        seed,
        ..SyntheticSpec::default()
    };
    let (tr, _) = generate_synthetic(&spec).unwrap();
    let dims = PipelineDims {
        img_dim: 12,
        txt_dim: 6,
        classes: 4,
        n_sym1: 8,
        n_sym2: 8,
        hidden: 10,
        d_sem: 6,
        d_txt: 6,
        d_fused: 6,
    };
    (tr, dims)
}

/// One round of FedAvg with one full-batch step per client on equal IID
/// shards, against one centralized full-batch step from the same start.
/// Returns the largest parameter difference.
pub fn fedavg_one_step_gap(phase: Phase, snr_db: f64, seed: u64) -> f64 {
    let (data, dims) = small_dataset(seed, 120);
    let pipeline = Pipeline::new(dims, Mode::Dtcn, seed);
    let train = TrainConfig {
        batch_size: data.len(),
        train_snr_db: snr_db,
        seed,
        ..TrainConfig::default()
    };
    let lr = 0.3;
    let fl = FederatedConfig {
        n_clients: 4,
        rounds: 1,
        local_epochs: 1,
        seed,
        ..FederatedConfig::default()
    };
    let trainer = PipelinePhaseTrainer {
        template: &pipeline,
        phase,
        train: &train,
        lr,
    };
    let (global, _) = run_federated(
        &fl,
        &pipeline.parameters(),
        &data,
        &trainer,
        |_| Ok(0.0),
        ExecMode::Sequential,
    )
    .unwrap();

    let mut central = pipeline.clone();
    run_phase(&mut central, &data, &train, phase, EpochWindow::centralized(1), lr).unwrap();
    let moved = central.parameters().max_abs_diff(&pipeline.parameters()).unwrap();
    assert!(moved > 1e-6, "the step must change the parameters");
    global.max_abs_diff(&central.parameters()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct SchedulerOutcome {
    pub instances: usize,
    /// Largest `|sum(after) - sum(before)| / max(sum(before), 1)`.
    pub conservation: f64,
    /// Largest `max_after - max_before`; must not be positive.
    pub max_increase: f64,
    /// `|plan optimum - grid optimum|` on the three-device instance.
    pub oracle_gap: f64,
}

pub fn random_devices(r: &mut impl Rng) -> Vec<DeviceState> {
    let n = r.random_range(1..=8);
    (0..n)
        .map(|i| {
            let mut d = DeviceState::new(format!("d{i}"), r.random_range(0.0..100.0), r.random_range(0.5..10.0));
            if r.random_bool(0.5) {
                d.predicted = r.random_range(0.0..20.0);
            }
            if r.random_bool(0.2) {
                d.workload = 0.0;
            }
            d
        })
        .collect()
}

/// Exhaustive search over transfers on a 0.25 grid for loads (9, 3, 0) and
/// capacities (1, 1, 2). Device 3 starts empty, so only devices 1 and 2 send.
pub fn grid_min_max() -> f64 {
    let (w, c) = ([9.0, 3.0, 0.0], [1.0, 1.0, 2.0]);
    let step = 0.25;
    let mut best = f64::INFINITY;
    let grid = |hi: f64| (0..=(hi / step) as usize).map(move |k| k as f64 * step);
    for t12 in grid(w[0]) {
        for t13 in grid(w[0] - t12) {
            for t21 in grid(w[1]) {
                for t23 in grid(w[1] - t21) {
                    let u = [w[0] - t12 - t13 + t21, w[1] - t21 - t23 + t12, w[2] + t13 + t23];
                    let m = (0..3).map(|i| u[i] / c[i]).fold(f64::NEG_INFINITY, f64::max);
                    best = best.min(m);
                }
            }
        }
    }
    best
}

pub fn scheduler_suite(instances: usize, seed: u64) -> SchedulerOutcome {
    let mut r = rng_from(seed, &[]);
    let (mut conservation, mut max_increase) = (0.0f64, f64::NEG_INFINITY);
    for k in 0..instances {
        let devices = random_devices(&mut r);
        let cap = (k % 2 == 1).then(|| r.random_range(0.5..30.0));
        let plan = balance_workloads_capped(&devices, cap).unwrap();
        let after = apply_transfers(&devices, &plan).unwrap();
        let before_sum: f64 = devices.iter().map(DeviceState::load).sum();
        let after_sum: f64 = after.iter().map(|d| d.workload).sum();
        conservation = conservation.max((after_sum - before_sum).abs() / before_sum.max(1.0));
        max_increase = max_increase.max(max_normalized_load(&after) - max_normalized_load(&devices));
    }
    let three = vec![
        DeviceState::new("a", 9.0, 1.0),
        DeviceState::new("b", 3.0, 1.0),
        DeviceState::new("c", 0.0, 2.0),
    ];
    let plan = balance_workloads_capped(&three, None).unwrap();
    let after = apply_transfers(&three, &plan).unwrap();
    SchedulerOutcome {
        instances,
        conservation,
        max_increase,
        oracle_gap: (max_normalized_load(&after) - grid_min_max()).abs(),
    }
}
