//! CNN encoder + recurrent stage + sigmoid head, in three variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::pool_output;
use crate::autodiff::{
    glorot_uniform, run_recurrent, BatchNormState, CellKind, Mode, ParameterStore, RecurrentSpec, Tape, Tensor, Var,
};
use crate::config::{join_list, KvMap};
use crate::error::{Error, Result};
use crate::events::{SampleWindow, FRAME_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    CnnGru,
    CnnBilstm,
    CnnLstm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CnnGru, Variant::CnnBilstm, Variant::CnnLstm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CnnGru => "cnn_gru",
            Variant::CnnBilstm => "cnn_bilstm",
            Variant::CnnLstm => "cnn_lstm",
        }
    }

    pub fn cell(self) -> CellKind {
        match self {
            Variant::CnnGru => CellKind::Gru,
            Variant::CnnBilstm | Variant::CnnLstm => CellKind::Lstm,
        }
    }

    pub fn bidirectional(self) -> bool {
        self == Variant::CnnBilstm
    }

    pub fn default_layers(self) -> usize {
        match self {
            Variant::CnnLstm => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}' (expected cnn_gru, cnn_bilstm or cnn_lstm)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub rnn_layers: usize,
    pub dropout: f64,
    pub seed: u64,
}

pub const MODEL_KEYS: [&str; 11] = [
    "model",
    "in_channels",
    "height",
    "width",
    "conv_channels",
    "kernel",
    "feature_dim",
    "hidden",
    "rnn_layers",
    "dropout",
    "seed",
];

impl ModelConfig {
    /// Full-size defaults for 80×60 frames.
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            in_channels: FRAME_CHANNELS,
            height: 60,
            width: 80,
            conv_channels: vec![16, 32, 64],
            kernel: 3,
            feature_dim: 128,
            hidden: 128,
            rnn_layers: variant.default_layers(),
            dropout: 0.2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.variant {
            Variant::CnnGru | Variant::CnnBilstm if self.rnn_layers != 1 => {
                return bad(format!("{} is single-layer; rnn_layers = {} not allowed", self.variant, self.rnn_layers))
            }
            Variant::CnnLstm if self.rnn_layers < 2 => {
                return bad(format!("cnn_lstm needs rnn_layers ≥ 2, got {}", self.rnn_layers))
            }
            _ => {}
        }
        if self.in_channels == 0 || self.kernel == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return bad("in_channels, kernel, feature_dim and hidden must be ≥ 1".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels {:?} must be a non-empty list of positive sizes", self.conv_channels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let min = 1usize << self.conv_channels.len().min(usize::BITS as usize - 1);
        if self.height < min || self.width < min {
            return bad(format!(
                "{}×{} input too small for {} pooling blocks (need ≥ {min} per side)",
                self.width,
                self.height,
                self.conv_channels.len()
            ));
        }
        Ok(())
    }

    /// `(C, H, W)` after each encoder block.
    pub fn encoder_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut h = self.height;
        let mut w = self.width;
        self.conv_channels
            .iter()
            .map(|&c| {
                // same-size conv for odd kernels; even kernels grow by one
                let pad = self.kernel / 2;
                h = h + 2 * pad + 1 - self.kernel;
                w = w + 2 * pad + 1 - self.kernel;
                let [_, _, ph, pw] = pool_output([1, c, h, w], 2);
                h = ph;
                w = pw;
                (c, h, w)
            })
            .collect()
    }

    pub fn flat_dim(&self) -> usize {
        self.encoder_dims().last().map_or(0, |&(c, h, w)| c * h * w)
    }

    pub fn recurrent_spec(&self) -> RecurrentSpec {
        RecurrentSpec {
            cell: self.variant.cell(),
            input: self.feature_dim,
            hidden: self.hidden,
            layers: self.rnn_layers,
            bidirectional: self.variant.bidirectional(),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("model", self.variant);
        m.set("in_channels", self.in_channels);
        m.set("height", self.height);
        m.set("width", self.width);
        m.set("conv_channels", join_list(&self.conv_channels));
        m.set("kernel", self.kernel);
        m.set("feature_dim", self.feature_dim);
        m.set("hidden", self.hidden);
        m.set("rnn_layers", self.rnn_layers);
        m.set("dropout", self.dropout);
        m.set("seed", self.seed);
        m
    }

    /// Reads model keys from `kv`, starting from the variant's defaults;
    /// other keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let variant: Variant = kv.parsed("model")?.unwrap_or(Variant::CnnLstm);
        let mut c = ModelConfig::new(variant);
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.parsed($key)? {
                    c.$field = v;
                }
            };
        }
        take!(in_channels, "in_channels");
        take!(height, "height");
        take!(width, "width");
        take!(kernel, "kernel");
        take!(feature_dim, "feature_dim");
        take!(hidden, "hidden");
        take!(rnn_layers, "rnn_layers");
        take!(dropout, "dropout");
        take!(seed, "seed");
        if let Some(v) = kv.list("conv_channels")? {
            c.conv_channels = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Built model: config plus batch-norm running statistics. Weights live in a
/// separate [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub bn: Vec<BatchNormState>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[L·B, 2]`, step-major, sigmoid-bounded.
    pub coords: Var,
    /// Head output before the sigmoid.
    pub scores: Var,
}

pub fn conv_name(i: usize) -> String {
    format!("enc.conv{i}.w")
}

pub fn bn_names(i: usize) -> (String, String) {
    (format!("enc.bn{i}.gamma"), format!("enc.bn{i}.beta"))
}

pub const FC_W: &str = "enc.fc.w";
pub const FC_B: &str = "enc.fc.b";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const RNN_PREFIX: &str = "rnn";

pub fn build_model(cfg: &ModelConfig) -> Result<(Model, ParameterStore)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new(cfg.seed);
    let k = cfg.kernel;
    let mut c_in = cfg.in_channels;
    let mut bn = Vec::new();
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        store.insert(conv_name(i), glorot_uniform(&mut rng, &[c, c_in, k, k], c_in * k * k, c * k * k))?;
        let (g, b) = bn_names(i);
        store.insert(g, Tensor::filled(&[c], 1.0))?;
        store.insert(b, Tensor::zeros(&[c]))?;
        bn.push(BatchNormState::new(c));
        c_in = c;
    }
    let flat = cfg.flat_dim();
    store.insert(FC_W, glorot_uniform(&mut rng, &[cfg.feature_dim, flat], flat, cfg.feature_dim))?;
    store.insert(FC_B, Tensor::zeros(&[cfg.feature_dim]))?;
    let spec = cfg.recurrent_spec();
    spec.init_params(&mut store, RNN_PREFIX, &mut rng)?;
    let out = spec.output_dim();
    store.insert(HEAD_W, glorot_uniform(&mut rng, &[2, out], out, 2))?;
    store.insert(HEAD_B, Tensor::zeros(&[2]))?;
    Ok((Model { cfg: cfg.clone(), bn }, store))
}

/// Packs windows into the `[L, B, C, H, W]` step-major layout `forward` expects.
pub fn batch_frames(windows: &[&SampleWindow]) -> Result<(Vec<f64>, usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Contract("cannot batch zero windows".into()))?;
    let (len, fs) = (first.len, first.frame_size());
    if windows.iter().any(|w| w.len != len || w.frame_size() != fs) {
        return Err(Error::shape("batch_frames", "windows differ in length or frame size"));
    }
    let mut out = Vec::with_capacity(len * windows.len() * fs);
    for l in 0..len {
        for w in windows {
            out.extend_from_slice(w.frame(l));
        }
    }
    Ok((out, len, windows.len()))
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            bn: cfg.conv_channels.iter().map(|&c| BatchNormState::new(c)).collect(),
        })
    }

    pub fn frame_size(&self) -> usize {
        self.cfg.in_channels * self.cfg.height * self.cfg.width
    }

    /// `frames` is `[L, B, C, H, W]` step-major. Train mode updates the
    /// batch-norm running statistics and draws dropout masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        store: &ParameterStore,
        frames: &[f64],
        len: usize,
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        if len == 0 || batch == 0 || frames.len() != len * batch * self.frame_size() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} values for L = {len}, B = {batch}, frame {}×{}×{}",
                    frames.len(),
                    cfg.in_channels,
                    cfg.height,
                    cfg.width
                ),
            ));
        }
        let n = len * batch;
        let mut x = tape.constant(&[n, cfg.in_channels, cfg.height, cfg.width], frames.to_vec())?;
        for (i, state) in self.bn.iter_mut().enumerate() {
            let w = tape.param(store, &conv_name(i))?;
            let (g, b) = bn_names(i);
            let g = tape.param(store, &g)?;
            let b = tape.param(store, &b)?;
            x = tape.conv2d(x, w, None, 1, cfg.kernel / 2)?;
            x = tape.batch_norm(x, g, b, state, mode)?;
            x = tape.relu(x);
            x = tape.avg_pool2d_floor(x, 2)?;
        }
        let flat = cfg.flat_dim();
        x = tape.reshape(x, &[n, flat])?;
        let fw = tape.param(store, FC_W)?;
        let fb = tape.param(store, FC_B)?;
        x = tape.linear(x, fw, Some(fb))?;
        x = tape.dropout(x, cfg.dropout, mode, rng)?;
        let seq = (0..len)
            .map(|l| tape.slice_rows(x, l * batch, batch))
            .collect::<Result<Vec<_>>>()?;
        let hs = run_recurrent(tape, &seq, &cfg.recurrent_spec(), store, RNN_PREFIX)?;
        let h = tape.concat_rows(&hs)?;
        let hw = tape.param(store, HEAD_W)?;
        let hb = tape.param(store, HEAD_B)?;
        let scores = tape.linear(h, hw, Some(hb))?;
        let coords = tape.sigmoid(scores);
        Ok(ForwardOutput { coords, scores })
    }

    /// Eval-mode coordinates, `[L·B]` step-major.
    pub fn predict(&self, store: &ParameterStore, frames: &[f64], len: usize, batch: usize) -> Result<Vec<[f64; 2]>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let out = scratch.forward(&mut tape, store, frames, len, batch, Mode::Eval, &mut NoRng)?;
        Ok(tape.value(out.coords).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    /// Eval-mode coordinates for one window, one per frame.
    pub fn predict_window(&self, store: &ParameterStore, w: &SampleWindow) -> Result<Vec<[f64; 2]>> {
        self.predict(store, &w.frames, w.len, 1)
    }

    /// Checks names and shapes in `store` against what this config builds.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let (_, fresh) = build_model(&self.cfg)?;
        for (name, t) in fresh.iter() {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("parameter '{name}' missing"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' has shape {:?}, config expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = store.names().find(|n| fresh.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }
}

/// Placeholder rng for eval passes, where dropout never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval mode draws no random numbers")
    }
}
