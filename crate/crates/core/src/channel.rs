//! AWGN channel simulation for the two hops of the relay pipeline.
//!
//! Symbols are real-valued. Every transmitted row is scaled to unit mean
//! power, so a hop at `snr_db` adds i.i.d. Gaussian noise of variance
//! `10^(-snr_db / 10)` per symbol. `snr_db = +inf` is the noiseless channel.
//!
//! Noise for hop `h` on batch `b` under master seed `m` is drawn from
//! `rng::rng_from(m, &[stream::NOISE, h, b])` (see [`hop_rng`]).

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::numcore::{Tape, Tensor};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopTag {
    DeviceToRelay,
    RelayToReceiver,
}

impl HopTag {
    pub fn index(self) -> u64 {
        match self {
            HopTag::DeviceToRelay => 0,
            HopTag::RelayToReceiver => 1,
        }
    }
}

/// Real channel symbols, one transmitted frame per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFrame {
    pub symbols: Tensor,
    pub hop: HopTag,
}

impl SemanticFrame {
    pub fn new(symbols: Tensor, hop: HopTag) -> Result<Self> {
        symbols.expect_matrix("semantic frame")?;
        Ok(Self { symbols, hop })
    }

    pub fn batch(&self) -> usize {
        self.symbols.rows()
    }

    pub fn width(&self) -> usize {
        self.symbols.cols()
    }

    /// Mean squared symbol value of each row.
    pub fn row_power(&self) -> Vec<f64> {
        (0..self.batch())
            .map(|r| {
                let row = self.symbols.row(r);
                row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, seed: u64) -> Self {
        Self { snr_db, seed }
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }

    pub fn hop_rng(&self, hop: HopTag, batch_index: u64) -> Rng {
        hop_rng(self.seed, hop, batch_index)
    }
}

pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

pub fn hop_rng(master_seed: u64, hop: HopTag, batch_index: u64) -> Rng {
    rng::rng_from(master_seed, &[rng::stream::NOISE, hop.index(), batch_index])
}

/// Gaussian noise of the given shape at `snr_db` relative to unit power.
pub fn awgn_noise(shape: &[usize], snr_db: f64, rng: &mut Rng) -> Tensor {
    let std = noise_variance(snr_db).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
    t
}

/// Scales each row to unit mean-square. All-zero rows are an error.
pub fn normalize_power(frame: &SemanticFrame) -> Result<SemanticFrame> {
    let mut tape = Tape::new();
    let x = tape.constant(frame.symbols.clone());
    let y = tape.normalize_power(x)?;
    Ok(SemanticFrame {
        symbols: tape.value(y)?.clone(),
        hop: frame.hop,
    })
}

/// Adds channel noise to an already normalized frame.
pub fn awgn_transmit(frame: &SemanticFrame, cfg: &ChannelConfig, rng: &mut Rng) -> SemanticFrame {
    let noise = awgn_noise(frame.symbols.shape(), cfg.snr_db, rng);
    SemanticFrame {
        symbols: frame.symbols.zip_map(&noise, |s, n| s + n),
        hop: frame.hop,
    }
}

/// `10 log10(P_clean / P_noise)`; `+inf` when the frames are identical.
pub fn measure_empirical_snr(clean: &SemanticFrame, noisy: &SemanticFrame) -> Result<f64> {
    if clean.symbols.shape() != noisy.symbols.shape() {
        return Err(Error::shape(
            "measure_empirical_snr",
            format!("{:?} vs {:?}", clean.symbols.shape(), noisy.symbols.shape()),
        ));
    }
    let n = clean.symbols.len().max(1) as f64;
    let signal: f64 = clean.symbols.data().iter().map(|v| v * v).sum::<f64>() / n;
    let noise: f64 = clean
        .symbols
        .data()
        .iter()
        .zip(noisy.symbols.data())
        .map(|(c, y)| (y - c) * (y - c))
        .sum::<f64>()
        / n;
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Transmits `symbols` unit-power random symbols at each SNR and reports the
/// measured SNR. Each SNR is an independent job.
pub fn snr_round_trip(snrs_db: &[f64], symbols: usize, seed: u64, exec: ExecMode) -> Result<Vec<f64>> {
    const ROW: usize = 1000;
    let rows = symbols.div_ceil(ROW);
    exec.try_map(snrs_db, |i, &snr| {
        let mut src = rng::rng_from(seed, &[rng::stream::DATA, i as u64]);
        let raw = awgn_noise(&[rows, ROW], 0.0, &mut src);
        let clean = normalize_power(&SemanticFrame::new(raw, HopTag::DeviceToRelay)?)?;
        let cfg = ChannelConfig::new(snr, seed);
        let noisy = awgn_transmit(&clean, &cfg, &mut cfg.hop_rng(HopTag::DeviceToRelay, i as u64));
        measure_empirical_snr(&clean, &noisy)
    })
}
