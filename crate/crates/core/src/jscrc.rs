//! Relay coding pipeline: transmitter, semantic relay and receiver.
//!
//! ```text
//! x_img -> semantic_encoder -> jsc_encoder -> [norm] -> AWGN hop 1
//!       -> jsc_decoder --+
//! x_txt -> modb_encoder -+-> concat -> fusion_net -> jsc_encoder2 -> [norm] -> AWGN hop 2
//!       -> jsc_decoder2 -> fusion_semantic_decoder -> logits
//! ```
//!
//! A missing modality enters the fusion input as a zero block of the width
//! its encoder would have produced. The modality-B encoder has no biases, so
//! an all-zero text input and an absent text input are the same thing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{awgn_noise, hop_rng, HopTag, SemanticFrame};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numcore::{Activation, Binding, Mlp, ParameterSet, Tape, Tensor, Var};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Image over hop 1 fused with relay-side text.
    Dtcn,
    JsccImageOnly,
    /// Text available at the relay; the device hop is skipped.
    JsccTextOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Dtcn, Mode::JsccImageOnly, Mode::JsccTextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dtcn => "dtcn",
            Mode::JsccImageOnly => "jscc_image_only",
            Mode::JsccTextOnly => "jscc_text_only",
        }
    }

    pub fn uses_image(self) -> bool {
        self != Mode::JsccTextOnly
    }

    pub fn uses_text(self) -> bool {
        self != Mode::JsccImageOnly
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s}")))
    }
}

/// Layer widths shared by the three models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDims {
    pub img_dim: usize,
    pub txt_dim: usize,
    pub classes: usize,
    pub d_sem: usize,
    pub d_txt: usize,
    pub d_fused: usize,
    pub n_sym1: usize,
    pub n_sym2: usize,
    pub hidden: usize,
}

impl Default for PipelineDims {
    fn default() -> Self {
        Self {
            img_dim: 256,
            txt_dim: 16,
            classes: 10,
            d_sem: 16,
            d_txt: 16,
            d_fused: 16,
            n_sym1: 64,
            n_sym2: 128,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dims: PipelineDims,
    pub mode: Mode,
    pub snr1_db: f64,
    pub snr2_db: f64,
}

impl PipelineConfig {
    pub fn new(dims: PipelineDims, mode: Mode, snr_db: f64) -> Self {
        Self {
            dims,
            mode,
            snr1_db: snr_db,
            snr2_db: snr_db,
        }
    }

    pub fn noiseless(dims: PipelineDims, mode: Mode) -> Self {
        Self::new(dims, mode, f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitterModel {
    pub semantic_encoder: Mlp,
    pub jsc_encoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayModel {
    /// Absent in text-only mode.
    pub jsc_decoder: Option<Mlp>,
    /// Absent in image-only mode.
    pub modb_encoder: Option<Mlp>,
    pub fusion_net: Mlp,
    pub jsc_encoder2: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverModel {
    pub jsc_decoder2: Mlp,
    pub fusion_semantic_decoder: Mlp,
}

pub(crate) const TX_SEM: &str = "transmitter.semantic_encoder";
pub(crate) const TX_JSC: &str = "transmitter.jsc_encoder";
pub(crate) const RELAY_JSC_DEC: &str = "relay.jsc_decoder";
pub(crate) const RELAY_MODB: &str = "relay.modb_encoder";
pub(crate) const RELAY_FUSION: &str = "relay.fusion_net";
pub(crate) const RELAY_JSC_ENC: &str = "relay.jsc_encoder2";
pub(crate) const RX_JSC_DEC: &str = "receiver.jsc_decoder2";
pub(crate) const RX_DECODER: &str = "receiver.fusion_semantic_decoder";

/// `role.component` part of a parameter name.
pub fn component_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

/// Components trained with cross-entropy while the channel codecs are bypassed.
pub const SEMANTIC_COMPONENTS: [&str; 4] = [TX_SEM, RELAY_MODB, RELAY_FUSION, RX_DECODER];
/// Channel codec components.
pub const JSC_COMPONENTS: [&str; 4] = [TX_JSC, RELAY_JSC_DEC, RELAY_JSC_ENC, RX_JSC_DEC];

fn matrix_input(x: &Tensor, width: usize, what: &'static str) -> Result<usize> {
    let (rows, cols) = x.expect_matrix(what)?;
    if cols != width {
        return Err(Error::shape(
            what,
            format!("expected width {width}, got {:?}", x.shape()),
        ));
    }
    Ok(rows)
}

impl TransmitterModel {
    /// Normalized hop-1 symbols.
    pub fn encode(&self, tape: &mut Tape, b: &mut Binding<'_>, x_img: Var) -> Result<Var> {
        let z = self.semantic_encoder.forward(tape, b, TX_SEM, x_img)?;
        let s = self.jsc_encoder.forward(tape, b, TX_JSC, z)?;
        tape.normalize_power(s)
    }
}

impl RelayModel {
    /// Fused feature from a decoded hop-1 frame and/or local text.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        b: &mut Binding<'_>,
        rx_symbols: Option<Var>,
        x_txt: Option<Var>,
        batch: usize,
    ) -> Result<Var> {
        let (d_sem, d_txt) = self.fusion_split();
        let img_feat = match (rx_symbols, &self.jsc_decoder) {
            (Some(s), Some(dec)) => dec.forward(tape, b, RELAY_JSC_DEC, s)?,
            (Some(_), None) => {
                return Err(Error::InvalidArgument("relay has no hop-1 decoder".into()));
            }
            (None, _) => tape.constant(Tensor::zeros(&[batch, d_sem])),
        };
        let txt_feat = match (x_txt, &self.modb_encoder) {
            (Some(t), Some(enc)) => enc.forward(tape, b, RELAY_MODB, t)?,
            (Some(_), None) => {
                return Err(Error::InvalidArgument("relay has no modality-B encoder".into()));
            }
            (None, _) => tape.constant(Tensor::zeros(&[batch, d_txt])),
        };
        let joint = tape.concat_cols(img_feat, txt_feat)?;
        self.fusion_net.forward(tape, b, RELAY_FUSION, joint)
    }

    /// Normalized hop-2 symbols for a fused feature.
    pub fn encode(&self, tape: &mut Tape, b: &mut Binding<'_>, fused: Var) -> Result<Var> {
        let s = self.jsc_encoder2.forward(tape, b, RELAY_JSC_ENC, fused)?;
        tape.normalize_power(s)
    }

    /// Widths of the image and text blocks of the fusion input.
    pub fn fusion_split(&self) -> (usize, usize) {
        let total = self.fusion_net.input_dim();
        match (&self.jsc_decoder, &self.modb_encoder) {
            (_, Some(m)) => (total - m.output_dim(), m.output_dim()),
            (Some(d), None) => (d.output_dim(), total - d.output_dim()),
            (None, None) => (total, 0),
        }
    }
}

impl ReceiverModel {
    pub fn decode(&self, tape: &mut Tape, b: &mut Binding<'_>, rx_symbols: Var) -> Result<Var> {
        let f = self.jsc_decoder2.forward(tape, b, RX_JSC_DEC, rx_symbols)?;
        self.fusion_semantic_decoder.forward(tape, b, RX_DECODER, f)
    }
}

pub fn transmitter_forward(x_img: &Tensor, model: &TransmitterModel) -> Result<SemanticFrame> {
    matrix_input(x_img, model.semantic_encoder.input_dim(), "transmitter_forward")?;
    let mut tape = Tape::new();
    let x = tape.constant(x_img.clone());
    let s = model.encode(&mut tape, &mut Binding::frozen(), x)?;
    SemanticFrame::new(tape.value(s)?.clone(), HopTag::DeviceToRelay)
}

/// Relay stage. Either input may be absent; a missing branch becomes zeros.
pub fn relay_forward(
    rx_frame: Option<&SemanticFrame>,
    x_txt: Option<&Tensor>,
    model: &RelayModel,
) -> Result<SemanticFrame> {
    let batch = match (rx_frame, x_txt) {
        (Some(f), Some(t)) => {
            let tb = t.expect_matrix("relay_forward")?.0;
            if f.batch() != tb {
                return Err(Error::shape(
                    "relay_forward",
                    format!("frame batch {} vs text batch {tb}", f.batch()),
                ));
            }
            tb
        }
        (Some(f), None) => f.batch(),
        (None, Some(t)) => t.expect_matrix("relay_forward")?.0,
        (None, None) => {
            return Err(Error::InvalidArgument("relay needs a frame or text".into()));
        }
    };
    if let (Some(f), Some(dec)) = (rx_frame, &model.jsc_decoder) {
        matrix_input(&f.symbols, dec.input_dim(), "relay_forward")?;
    }
    if let (Some(t), Some(enc)) = (x_txt, &model.modb_encoder) {
        matrix_input(t, enc.input_dim(), "relay_forward")?;
    }
    let mut tape = Tape::new();
    let b = &mut Binding::frozen();
    let s = rx_frame.map(|f| tape.constant(f.symbols.clone()));
    let t = x_txt.map(|t| tape.constant(t.clone()));
    let fused = model.fuse(&mut tape, b, s, t, batch)?;
    let out = model.encode(&mut tape, b, fused)?;
    SemanticFrame::new(tape.value(out)?.clone(), HopTag::RelayToReceiver)
}

pub fn receiver_forward(rx_frame: &SemanticFrame, model: &ReceiverModel) -> Result<Tensor> {
    matrix_input(&rx_frame.symbols, model.jsc_decoder2.input_dim(), "receiver_forward")?;
    let mut tape = Tape::new();
    let s = tape.constant(rx_frame.symbols.clone());
    let logits = model.decode(&mut tape, &mut Binding::frozen(), s)?;
    Ok(tape.value(logits)?.clone())
}

/// Identifies the noise realisation of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub batch_index: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, batch_index: u64) -> Self {
        Self { seed, batch_index }
    }

    pub fn hop_noise(&self, hop: HopTag, shape: &[usize], snr_db: f64) -> Tensor {
        awgn_noise(shape, snr_db, &mut hop_rng(self.seed, hop, self.batch_index))
    }
}

/// How a forward pass treats the channel codecs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Route {
    /// Semantic features go straight to fusion and the classifier.
    Bypass,
    /// Full two-hop transmission.
    Channel {
        snr1_db: f64,
        snr2_db: f64,
        noise: NoiseKey,
    },
}

/// Channel encoder outputs start from a small constant bias, so a row whose
/// hidden units are all inactive still yields a frame with nonzero power.
const ENCODER_OUTPUT_BIAS: f64 = 0.01;

fn offset_output(mut mlp: Mlp) -> Mlp {
    if let Some(b) = mlp.layers.last_mut().and_then(|l| l.bias.as_mut()) {
        *b = b.map(|_| ENCODER_OUTPUT_BIAS);
    }
    mlp
}

/// The three models of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub dims: PipelineDims,
    pub mode: Mode,
    pub transmitter: Option<TransmitterModel>,
    pub relay: RelayModel,
    pub receiver: ReceiverModel,
}

impl Pipeline {
    /// Freshly initialised models for `mode`.
    pub fn new(dims: PipelineDims, mode: Mode, seed: u64) -> Self {
        use Activation::{Identity, Relu, Tanh};
        let d = dims;
        let mut r = rng::rng_from(seed, &[stream::INIT]);
        let mut mlp = |sizes: &[usize], out: Activation, bias: bool| Mlp::new(sizes, Relu, out, bias, &mut r);
        let semantic_encoder = mlp(&[d.img_dim, d.hidden, d.d_sem], Tanh, true);
        let jsc_encoder = offset_output(mlp(&[d.d_sem, d.hidden, d.n_sym1], Identity, true));
        let jsc_decoder = mlp(&[d.n_sym1, d.hidden, d.d_sem], Identity, true);
        let modb_encoder = mlp(&[d.txt_dim, d.hidden, d.d_txt], Tanh, false);
        let fusion_net = mlp(&[d.d_sem + d.d_txt, d.hidden, d.d_fused], Tanh, true);
        let jsc_encoder2 = offset_output(mlp(&[d.d_fused, d.hidden, d.n_sym2], Identity, true));
        let jsc_decoder2 = mlp(&[d.n_sym2, d.hidden, d.d_fused], Identity, true);
        let fusion_semantic_decoder = mlp(&[d.d_fused, d.classes], Identity, true);
        Self {
            dims,
            mode,
            transmitter: mode.uses_image().then_some(TransmitterModel {
                semantic_encoder,
                jsc_encoder,
            }),
            relay: RelayModel {
                jsc_decoder: mode.uses_image().then_some(jsc_decoder),
                modb_encoder: mode.uses_text().then_some(modb_encoder),
                fusion_net,
                jsc_encoder2,
            },
            receiver: ReceiverModel {
                jsc_decoder2,
                fusion_semantic_decoder,
            },
        }
    }

    /// Every parameter in a fixed order: transmitter, relay, receiver.
    pub fn parameters(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (name, mlp) in self.components() {
            mlp.export(name, &mut p).expect("component names are unique");
        }
        p
    }

    pub fn set_parameters(&mut self, params: &ParameterSet) -> Result<()> {
        for (name, mlp) in self.components_mut() {
            mlp.import(name, params)?;
        }
        Ok(())
    }

    /// Parameters of one role (`transmitter`, `relay`, `receiver`).
    pub fn role_parameters(&self, role: &str) -> ParameterSet {
        let prefix = format!("{role}.");
        self.parameters().filter(|n| n.starts_with(&prefix))
    }

    pub fn components(&self) -> Vec<(&'static str, &Mlp)> {
        let mut v = Vec::new();
        if let Some(t) = &self.transmitter {
            v.push((TX_SEM, &t.semantic_encoder));
            v.push((TX_JSC, &t.jsc_encoder));
        }
        if let Some(m) = &self.relay.jsc_decoder {
            v.push((RELAY_JSC_DEC, m));
        }
        if let Some(m) = &self.relay.modb_encoder {
            v.push((RELAY_MODB, m));
        }
        v.push((RELAY_FUSION, &self.relay.fusion_net));
        v.push((RELAY_JSC_ENC, &self.relay.jsc_encoder2));
        v.push((RX_JSC_DEC, &self.receiver.jsc_decoder2));
        v.push((RX_DECODER, &self.receiver.fusion_semantic_decoder));
        v
    }

    fn components_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.transmitter {
            v.push((TX_SEM, &mut t.semantic_encoder));
            v.push((TX_JSC, &mut t.jsc_encoder));
        }
        if let Some(m) = &mut self.relay.jsc_decoder {
            v.push((RELAY_JSC_DEC, m));
        }
        if let Some(m) = &mut self.relay.modb_encoder {
            v.push((RELAY_MODB, m));
        }
        v.push((RELAY_FUSION, &mut self.relay.fusion_net));
        v.push((RELAY_JSC_ENC, &mut self.relay.jsc_encoder2));
        v.push((RX_JSC_DEC, &mut self.receiver.jsc_decoder2));
        v.push((RX_DECODER, &mut self.receiver.fusion_semantic_decoder));
        v
    }

    pub fn component(&self, name: &str) -> Option<&Mlp> {
        self.components().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub(crate) fn component_mut(&mut self, name: &str) -> Option<&mut Mlp> {
        self.components_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if self.mode.uses_image() {
            let rows = matrix_input(&batch.img, self.dims.img_dim, "pipeline image input")?;
            if rows != batch.len() {
                return Err(Error::shape("pipeline", "image rows differ from label count"));
            }
        }
        if self.mode.uses_text() {
            let rows = matrix_input(&batch.txt, self.dims.txt_dim, "pipeline text input")?;
            if rows != batch.len() {
                return Err(Error::shape("pipeline", "text rows differ from label count"));
            }
        }
        Ok(())
    }

    /// Records the whole forward pass on `tape` and returns the logits.
    ///
    /// Only the modalities the mode uses are read from `batch`.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binding<'_>, batch: &Batch, route: Route) -> Result<Var> {
        self.check_batch(batch)?;
        let n = batch.len();
        let img = self.mode.uses_image().then(|| tape.constant(batch.img.clone()));
        let txt = self.mode.uses_text().then(|| tape.constant(batch.txt.clone()));
        let tx = self.transmitter.as_ref();
        match route {
            Route::Bypass => {
                let img_feat = match (img, tx) {
                    (Some(x), Some(t)) => t.semantic_encoder.forward(tape, b, TX_SEM, x)?,
                    _ => tape.constant(Tensor::zeros(&[n, self.dims.d_sem])),
                };
                let txt_feat = match (txt, &self.relay.modb_encoder) {
                    (Some(t), Some(enc)) => enc.forward(tape, b, RELAY_MODB, t)?,
                    _ => tape.constant(Tensor::zeros(&[n, self.dims.d_txt])),
                };
                let joint = tape.concat_cols(img_feat, txt_feat)?;
                let f = self.relay.fusion_net.forward(tape, b, RELAY_FUSION, joint)?;
                self.receiver.fusion_semantic_decoder.forward(tape, b, RX_DECODER, f)
            }
            Route::Channel {
                snr1_db,
                snr2_db,
                noise,
            } => {
                let rx1 = match (img, tx) {
                    (Some(x), Some(t)) => {
                        let s = t.encode(tape, b, x)?;
                        let shape = tape.value(s)?.shape().to_vec();
                        let w = noise.hop_noise(HopTag::DeviceToRelay, &shape, snr1_db);
                        Some(tape.add_constant(s, &w)?)
                    }
                    _ => None,
                };
                let fused = self.relay.fuse(tape, b, rx1, txt, n)?;
                let s2 = self.relay.encode(tape, b, fused)?;
                let shape = tape.value(s2)?.shape().to_vec();
                let w = noise.hop_noise(HopTag::RelayToReceiver, &shape, snr2_db);
                let rx2 = tape.add_constant(s2, &w)?;
                self.receiver.decode(tape, b, rx2)
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for role in ["transmitter", "relay", "receiver"] {
            let p = self.role_parameters(role);
            if !p.is_empty() {
                p.save(&dir.join(format!("{role}.ckpt")))?;
            }
        }
        let manifest = Manifest {
            mode: self.mode,
            dims: self.dims,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut pipeline = Pipeline::new(manifest.dims, manifest.mode, 0);
        let mut all = ParameterSet::new();
        for role in ["transmitter", "relay", "receiver"] {
            let file = dir.join(format!("{role}.ckpt"));
            if !file.exists() && pipeline.role_parameters(role).is_empty() {
                continue;
            }
            for (name, t) in ParameterSet::load(&file)?.iter() {
                all.insert(name, t.clone())?;
            }
        }
        pipeline.set_parameters(&all)?;
        Ok(pipeline)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    mode: Mode,
    dims: PipelineDims,
}

/// Transmitter, both hops, relay and receiver under `cfg`'s SNRs.
pub fn end_to_end(batch: &Batch, pipeline: &Pipeline, cfg: &PipelineConfig, noise: NoiseKey) -> Result<Tensor> {
    if cfg.mode != pipeline.mode || cfg.dims != pipeline.dims {
        return Err(Error::InvalidArgument(
            "pipeline config does not match the models".into(),
        ));
    }
    let mut tape = Tape::new();
    let logits = pipeline.forward(
        &mut tape,
        &mut Binding::frozen(),
        batch,
        Route::Channel {
            snr1_db: cfg.snr1_db,
            snr2_db: cfg.snr2_db,
            noise,
        },
    )?;
    Ok(tape.value(logits)?.clone())
}
