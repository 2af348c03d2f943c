use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{awgn_transmit, ChannelConfig, HopTag, SemanticFrame};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::jscrc::{receiver_forward, relay_forward, transmitter_forward, NoiseKey, Pipeline, PipelineConfig};
use crate::numcore::Tensor;

const BYTES_PER_SYMBOL: u64 = 8;

/// Bytes a batch would occupy raw versus what each hop carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteAccount {
    /// Raw device-side input the transmitter replaces.
    pub raw_input: u64,
    pub device_to_relay: u64,
    pub relay_to_receiver: u64,
    pub total: u64,
}

impl ByteAccount {
    /// Raw input bytes per byte sent over the first hop.
    pub fn compression_ratio(&self) -> f64 {
        self.raw_input as f64 / self.device_to_relay as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointInference {
    pub logits: Tensor,
    /// Device encoding plus the first hop.
    pub local_seconds: f64,
    /// Relay fusion, second hop and receiver decoding.
    pub global_seconds: f64,
    pub bytes: ByteAccount,
}

/// Local phase on the device, global phase on the edge server.
///
/// Runs the stages as separate calls with the same noise draws as
/// [`crate::jscrc::end_to_end`], so the logits are identical.
pub fn joint_inference(
    pipeline: &Pipeline,
    batch: &Batch,
    cfg: &PipelineConfig,
    noise: NoiseKey,
) -> Result<JointInference> {
    if cfg.mode != pipeline.mode || cfg.dims != pipeline.dims {
        return Err(Error::InvalidArgument(
            "pipeline config does not match the models".into(),
        ));
    }
    let n = batch.len() as u64;
    let hop1 = ChannelConfig::new(cfg.snr1_db, noise.seed);
    let hop2 = ChannelConfig::new(cfg.snr2_db, noise.seed);

    let start = Instant::now();
    let received: Option<SemanticFrame> = match (&pipeline.transmitter, pipeline.mode.uses_image()) {
        (Some(tx), true) => {
            let frame = transmitter_forward(&batch.img, tx)?;
            let mut r = hop1.hop_rng(HopTag::DeviceToRelay, noise.batch_index);
            Some(awgn_transmit(&frame, &hop1, &mut r))
        }
        _ => None,
    };
    let local_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let txt = pipeline.mode.uses_text().then_some(&batch.txt);
    let frame2 = relay_forward(received.as_ref(), txt, &pipeline.relay)?;
    let mut r = hop2.hop_rng(HopTag::RelayToReceiver, noise.batch_index);
    let rx2 = awgn_transmit(&frame2, &hop2, &mut r);
    let logits = receiver_forward(&rx2, &pipeline.receiver)?;
    let global_seconds = start.elapsed().as_secs_f64();

    let device_to_relay = received
        .as_ref()
        .map_or(0, |f| (f.batch() * f.width()) as u64 * BYTES_PER_SYMBOL);
    let relay_to_receiver = (frame2.batch() * frame2.width()) as u64 * BYTES_PER_SYMBOL;
    Ok(JointInference {
        logits,
        local_seconds,
        global_seconds,
        bytes: ByteAccount {
            raw_input: n * pipeline.dims.img_dim as u64 * BYTES_PER_SYMBOL,
            device_to_relay,
            relay_to_receiver,
            total: device_to_relay + relay_to_receiver,
        },
    })
}
