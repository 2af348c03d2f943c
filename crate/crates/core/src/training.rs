//! Three-phase centralized training and evaluation.
//!
//! 1. semantic encoders, fusion and classifier with the channel codecs
//!    bypassed (cross-entropy);
//! 2. each channel codec pair as an autoencoder through its own AWGN hop,
//!    reconstructing the frozen upstream feature (L1);
//! 3. everything jointly through both noisy hops (cross-entropy).
//!
//! Every random draw is keyed by `(seed, phase, client, epoch, batch)`, so a
//! centralized run is the single-client special case of a federated one.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_noise, hop_rng, HopTag};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::jscrc::{
    component_of, end_to_end, NoiseKey, Pipeline, PipelineConfig, Route, JSC_COMPONENTS, RELAY_JSC_DEC, RELAY_JSC_ENC,
    RX_JSC_DEC, SEMANTIC_COMPONENTS, TX_JSC,
};
use crate::numcore::{Binding, Mlp, ParameterSet, Sgd, Tape, Tensor};
use crate::rng::{self, stream};

/// Rows per evaluation batch. Fixed so that noise draws do not depend on
/// how evaluation is scheduled.
pub const EVAL_BATCH: usize = 250;

const EVAL_LABEL: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase_epochs: [usize; 3],
    pub learning_rates: [f64; 3],
    pub batch_size: usize,
    pub momentum: f64,
    pub train_snr_db: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase_epochs: [20, 20, 20],
            learning_rates: [0.05, 0.05, 0.02],
            batch_size: 32,
            momentum: 0.0,
            train_snr_db: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Semantic,
    Jsc,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Semantic, Phase::Jsc, Phase::Joint];

    pub fn number(self) -> u8 {
        match self {
            Phase::Semantic => 1,
            Phase::Jsc => 2,
            Phase::Joint => 3,
        }
    }

    fn slot(self) -> usize {
        self.number() as usize - 1
    }

    /// Whether parameter `name` is updated in this phase.
    pub fn trains(self, name: &str) -> bool {
        let c = component_of(name);
        match self {
            Phase::Semantic => SEMANTIC_COMPONENTS.contains(&c),
            Phase::Jsc => JSC_COMPONENTS.contains(&c),
            Phase::Joint => true,
        }
    }

    pub fn epochs(self, cfg: &TrainConfig) -> usize {
        cfg.phase_epochs[self.slot()]
    }

    pub fn learning_rate(self, cfg: &TrainConfig) -> f64 {
        cfg.learning_rates[self.slot()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: u8,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub snr_db: f64,
    pub wall_seconds: f64,
}

/// Which slice of a longer epoch schedule a call covers, and for whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochWindow {
    pub client: u64,
    pub first_epoch: usize,
    pub epochs: usize,
}

impl EpochWindow {
    pub fn centralized(epochs: usize) -> Self {
        Self {
            client: 0,
            first_epoch: 0,
            epochs,
        }
    }
}

fn epoch_order(n: usize, seed: u64, phase: Phase, client: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::rng_from(seed, &[stream::SHUFFLE, phase.number() as u64, client, epoch as u64]);
    order.shuffle(&mut r);
    order
}

fn noise_master(seed: u64, phase: Phase, client: u64, epoch: usize) -> u64 {
    rng::derive(seed, &[stream::NOISE, phase.number() as u64, client, epoch as u64])
}

fn validate(data: &Dataset, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    Ok(())
}

/// Runs `window.epochs` epochs of `phase` on `data` at learning rate `lr`.
pub fn run_phase(
    pipeline: &mut Pipeline,
    data: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    window: EpochWindow,
    lr: f64,
) -> Result<Vec<MetricsRecord>> {
    validate(data, cfg, lr)?;
    match phase {
        Phase::Jsc => run_jsc_phase(pipeline, data, cfg, window, lr),
        _ => run_classifier_phase(pipeline, data, cfg, phase, window, lr),
    }
}

fn run_classifier_phase(
    pipeline: &mut Pipeline,
    data: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    window: EpochWindow,
    lr: f64,
) -> Result<Vec<MetricsRecord>> {
    let mut sgd = Sgd::new(lr, cfg.momentum);
    let mut params = pipeline.parameters();
    let mut records = Vec::with_capacity(window.epochs);
    for epoch in window.first_epoch..window.first_epoch + window.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, phase, window.client, epoch);
        let master = noise_master(cfg.seed, phase, window.client, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(chunk);
            let route = match phase {
                Phase::Semantic => Route::Bypass,
                _ => Route::Channel {
                    snr1_db: cfg.train_snr_db,
                    snr2_db: cfg.train_snr_db,
                    noise: NoiseKey::new(master, bi as u64),
                },
            };
            let mut tape = Tape::new();
            let mut binding = Binding::new(|n| phase.trains(n));
            let logits = pipeline.forward(&mut tape, &mut binding, &batch, route)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            loss_sum += tape.value(loss)?.item() * batch.len() as f64;
            correct += count_correct(tape.value(logits)?, &batch.labels);
            let grads = binding.gradients(&tape, &tape.backward(loss)?)?;
            sgd.step(&mut params, &grads)?;
            pipeline.set_parameters(&params)?;
        }
        records.push(MetricsRecord {
            phase: phase.number(),
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            snr_db: cfg.train_snr_db,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

/// Pre-channel features the two codec pairs must reconstruct:
/// the semantic feature (hop 1, if the mode has a transmitter) and the fused
/// feature (hop 2), both computed with channels bypassed.
pub fn codec_targets(pipeline: &Pipeline, data: &Dataset) -> Result<(Option<Tensor>, Tensor)> {
    let batch = data.all();
    let mut tape = Tape::new();
    let b = &mut Binding::frozen();
    let n = batch.len();
    let sem = match &pipeline.transmitter {
        Some(t) => {
            let x = tape.constant(batch.img.clone());
            Some(
                t.semantic_encoder
                    .forward(&mut tape, b, "transmitter.semantic_encoder", x)?,
            )
        }
        None => None,
    };
    let img_feat = match sem {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(&[n, pipeline.dims.d_sem])),
    };
    let txt_feat = match &pipeline.relay.modb_encoder {
        Some(enc) => {
            let t = tape.constant(batch.txt.clone());
            enc.forward(&mut tape, b, "relay.modb_encoder", t)?
        }
        None => tape.constant(Tensor::zeros(&[n, pipeline.dims.d_txt])),
    };
    let joint = tape.concat_cols(img_feat, txt_feat)?;
    let fused = pipeline
        .relay
        .fusion_net
        .forward(&mut tape, b, "relay.fusion_net", joint)?;
    let sem = sem.map(|v| tape.value(v).cloned()).transpose()?;
    Ok((sem, tape.value(fused)?.clone()))
}

/// One encoder/decoder pair trained through a single AWGN hop.
struct HopPair<'a> {
    hop: HopTag,
    encoder: &'a mut Mlp,
    decoder: &'a mut Mlp,
    targets: &'a Tensor,
    sgd: Sgd,
}

impl HopPair<'_> {
    fn params(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        self.encoder.export("enc", &mut p).expect("fresh set");
        self.decoder.export("dec", &mut p).expect("fresh set");
        p
    }

    /// One minibatch step; returns the batch loss.
    fn step(&mut self, rows: &[usize], snr_db: f64, master: u64, batch_index: u64) -> Result<f64> {
        let feats = self.targets.gather_rows(rows);
        let mut tape = Tape::new();
        let mut binding = Binding::all();
        let x = tape.constant(feats);
        let s = self.encoder.forward(&mut tape, &mut binding, "enc", x)?;
        let s = tape.normalize_power(s)?;
        let shape = tape.value(s)?.shape().to_vec();
        let w = awgn_noise(&shape, snr_db, &mut hop_rng(master, self.hop, batch_index));
        let y = tape.add_constant(s, &w)?;
        let rec = self.decoder.forward(&mut tape, &mut binding, "dec", y)?;
        let loss = tape.l1_loss(rec, x)?;
        let value = tape.value(loss)?.item();
        let grads = binding.gradients(&tape, &tape.backward(loss)?)?;
        let mut params = self.params();
        self.sgd.step(&mut params, &grads)?;
        self.encoder.import("enc", &params)?;
        self.decoder.import("dec", &params)?;
        Ok(value)
    }
}

/// Trains a standalone codec pair to reconstruct `targets` through a hop at
/// `snr_db`. Returns the mean L1 loss of each epoch.
pub fn train_codec_pair(
    encoder: &mut Mlp,
    decoder: &mut Mlp,
    targets: &Tensor,
    hop: HopTag,
    cfg: &TrainConfig,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if targets.rows() == 0 {
        return Err(Error::EmptyDataset("codec targets"));
    }
    let mut pair = HopPair {
        hop,
        encoder,
        decoder,
        targets,
        sgd: Sgd::new(lr, cfg.momentum),
    };
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(targets.rows(), cfg.seed, Phase::Jsc, 0, epoch);
        let master = noise_master(cfg.seed, Phase::Jsc, 0, epoch);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            sum += pair.step(chunk, cfg.train_snr_db, master, bi as u64)? * chunk.len() as f64;
        }
        losses.push(sum / targets.rows() as f64);
    }
    Ok(losses)
}

/// Reconstruction L1 of a codec pair over `targets` through one noisy pass.
pub fn codec_pair_loss(
    encoder: &Mlp,
    decoder: &Mlp,
    targets: &Tensor,
    hop: HopTag,
    snr_db: f64,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = &mut Binding::frozen();
    let x = tape.constant(targets.clone());
    let s = encoder.forward(&mut tape, b, "enc", x)?;
    let s = tape.normalize_power(s)?;
    let shape = tape.value(s)?.shape().to_vec();
    let w = awgn_noise(&shape, snr_db, &mut hop_rng(seed, hop, 0));
    let y = tape.add_constant(s, &w)?;
    let rec = decoder.forward(&mut tape, b, "dec", y)?;
    let loss = tape.l1_loss(rec, x)?;
    Ok(tape.value(loss)?.item())
}

fn take_pair(pipeline: &mut Pipeline, enc: &str, dec: &str) -> Option<(Mlp, Mlp)> {
    let e = pipeline.component(enc)?.clone();
    let d = pipeline.component(dec)?.clone();
    Some((e, d))
}

fn put_pair(pipeline: &mut Pipeline, enc: &str, dec: &str, pair: (Mlp, Mlp)) {
    *pipeline.component_mut(enc).expect("taken from here") = pair.0;
    *pipeline.component_mut(dec).expect("taken from here") = pair.1;
}

fn run_jsc_phase(
    pipeline: &mut Pipeline,
    data: &Dataset,
    cfg: &TrainConfig,
    window: EpochWindow,
    lr: f64,
) -> Result<Vec<MetricsRecord>> {
    let (sem, fused) = codec_targets(pipeline, data)?;
    let mut hop1 = match &sem {
        Some(_) => take_pair(pipeline, TX_JSC, RELAY_JSC_DEC),
        None => None,
    };
    let mut hop2 = take_pair(pipeline, RELAY_JSC_ENC, RX_JSC_DEC).expect("every mode has hop 2");
    let mut sgd1 = Sgd::new(lr, cfg.momentum);
    let mut sgd2 = Sgd::new(lr, cfg.momentum);
    let mut records = Vec::with_capacity(window.epochs);
    for epoch in window.first_epoch..window.first_epoch + window.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, Phase::Jsc, window.client, epoch);
        let master = noise_master(cfg.seed, Phase::Jsc, window.client, epoch);
        let (mut l1, mut l2) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let w = chunk.len() as f64;
            if let (Some((e, d)), Some(t)) = (hop1.as_mut(), sem.as_ref()) {
                let mut pair = HopPair {
                    hop: HopTag::DeviceToRelay,
                    encoder: e,
                    decoder: d,
                    targets: t,
                    sgd: std::mem::replace(&mut sgd1, Sgd::new(lr, cfg.momentum)),
                };
                l1 += pair.step(chunk, cfg.train_snr_db, master, bi as u64)? * w;
                sgd1 = pair.sgd;
            }
            let mut pair = HopPair {
                hop: HopTag::RelayToReceiver,
                encoder: &mut hop2.0,
                decoder: &mut hop2.1,
                targets: &fused,
                sgd: std::mem::replace(&mut sgd2, Sgd::new(lr, cfg.momentum)),
            };
            l2 += pair.step(chunk, cfg.train_snr_db, master, bi as u64)? * w;
            sgd2 = pair.sgd;
        }
        let n = data.len() as f64;
        let loss = match hop1 {
            Some(_) => (l1 / n + l2 / n) / 2.0,
            None => l2 / n,
        };
        if let Some(p) = hop1.clone() {
            put_pair(pipeline, TX_JSC, RELAY_JSC_DEC, p);
        }
        put_pair(pipeline, RELAY_JSC_ENC, RX_JSC_DEC, hop2.clone());
        let accuracy = evaluate_with(
            pipeline,
            data,
            cfg.train_snr_db,
            rng::derive(cfg.seed, &[EVAL_LABEL, window.client, epoch as u64]),
            ExecMode::Sequential,
        )?;
        records.push(MetricsRecord {
            phase: Phase::Jsc.number(),
            epoch,
            loss,
            accuracy,
            snr_db: cfg.train_snr_db,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

pub fn train_phase1(pipeline: &mut Pipeline, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    train_phase(pipeline, data, cfg, Phase::Semantic)
}

pub fn train_phase2(pipeline: &mut Pipeline, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    train_phase(pipeline, data, cfg, Phase::Jsc)
}

pub fn train_phase3(pipeline: &mut Pipeline, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    train_phase(pipeline, data, cfg, Phase::Joint)
}

fn train_phase(pipeline: &mut Pipeline, data: &Dataset, cfg: &TrainConfig, phase: Phase) -> Result<Vec<MetricsRecord>> {
    run_phase(
        pipeline,
        data,
        cfg,
        phase,
        EpochWindow::centralized(phase.epochs(cfg)),
        phase.learning_rate(cfg),
    )
}

/// All three phases in order.
pub fn train_all(pipeline: &mut Pipeline, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for phase in Phase::ALL {
        records.extend(train_phase(pipeline, data, cfg, phase)?);
    }
    Ok(records)
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn eval_chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Noise seed used by evaluation batch `i` under `seed`.
pub fn eval_noise(seed: u64, batch_index: usize) -> NoiseKey {
    NoiseKey::new(rng::derive(seed, &[stream::NOISE, EVAL_LABEL]), batch_index as u64)
}

/// Logits of every sample at `snr_db` on both hops.
pub fn predict(pipeline: &Pipeline, data: &Dataset, snr_db: f64, seed: u64, exec: ExecMode) -> Result<Vec<Tensor>> {
    let cfg = PipelineConfig::new(pipeline.dims, pipeline.mode, snr_db);
    exec.try_map(&eval_chunks(data.len()), |i, rows| {
        end_to_end(&data.batch(rows), pipeline, &cfg, eval_noise(seed, i))
    })
}

/// Fraction of argmax predictions equal to the labels.
pub fn evaluate(pipeline: &Pipeline, data: &Dataset, snr_db: f64, seed: u64) -> Result<f64> {
    evaluate_with(pipeline, data, snr_db, seed, ExecMode::default())
}

pub fn evaluate_with(pipeline: &Pipeline, data: &Dataset, snr_db: f64, seed: u64, exec: ExecMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation data"));
    }
    let chunks = eval_chunks(data.len());
    let logits = predict(pipeline, data, snr_db, seed, exec)?;
    let correct: usize = logits
        .iter()
        .zip(&chunks)
        .map(|(l, rows)| {
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
            count_correct(l, &labels)
        })
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over `data` with the channel codecs bypassed.
pub fn bypass_loss(pipeline: &Pipeline, data: &Dataset) -> Result<f64> {
    let batch: Batch = data.all();
    let mut tape = Tape::new();
    let logits = pipeline.forward(&mut tape, &mut Binding::frozen(), &batch, Route::Bypass)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    Ok(tape.value(loss)?.item())
}
