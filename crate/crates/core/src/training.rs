//! Weighted-MSE training with Adam, plus checkpoints and per-epoch reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ByteReader, ByteWriter};
use crate::autodiff::{Mode, ParameterStore, Tape, Var};
use crate::config::{join_list, parse_list, KvMap};
use crate::error::{Error, Result};
use crate::events::SampleWindow;
use crate::metrics::{collect_points, pixel_accuracy, EvalOptions, PixelSpace, DEFAULT_TOLERANCES};
use crate::models::{batch_frames, build_model, Model, ModelConfig};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: [f64; 2],
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub use_close_mask: bool,
    pub val_split: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 20,
            epochs: 200,
            loss_weights: [1.0, 1.0],
            seed: 42,
            checkpoint_every: 10,
            use_close_mask: false,
            val_split: 0.2,
            clip_norm: 5.0,
        }
    }
}

pub const TRAIN_KEYS: [&str; 9] = [
    "learning_rate",
    "batch_size",
    "epochs",
    "loss_weights",
    "seed",
    "checkpoint_every",
    "use_close_mask",
    "val_split",
    "clip_norm",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2 for batch norm, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        let [wx, wy] = self.loss_weights;
        if !(wx >= 0.0 && wy >= 0.0 && wx.is_finite() && wy.is_finite()) || wx + wy == 0.0 {
            return bad(format!("loss_weights {:?} must be ≥ 0 and not both zero", self.loss_weights));
        }
        if !(0.0..=0.5).contains(&self.val_split) {
            return bad(format!("val_split {} outside [0, 0.5]", self.val_split));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("learning_rate", self.learning_rate);
        m.set("batch_size", self.batch_size);
        m.set("epochs", self.epochs);
        m.set("loss_weights", join_list(&self.loss_weights));
        m.set("seed", self.seed);
        m.set("checkpoint_every", self.checkpoint_every);
        m.set("use_close_mask", self.use_close_mask);
        m.set("val_split", self.val_split);
        m.set("clip_norm", self.clip_norm);
        m
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.parsed(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(learning_rate);
        take!(batch_size);
        take!(epochs);
        take!(seed);
        take!(checkpoint_every);
        take!(use_close_mask);
        take!(val_split);
        take!(clip_norm);
        if let Some(v) = kv.get("loss_weights") {
            let w: Vec<f64> = parse_list("loss_weights", v)?;
            c.loss_weights = w
                .try_into()
                .map_err(|w: Vec<f64>| Error::Config(format!("loss_weights needs 2 values, got {}", w.len())))?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// `(1/N) Σ wᵢ (pred − target)²` over steps not flagged closed; `pred` is
/// `[L·B, 2]` step-major and `close` lines up with its rows.
pub fn weighted_mse(
    tape: &mut Tape,
    pred: Var,
    target: &[f64],
    weights: [f64; 2],
    close: Option<&[bool]>,
) -> Result<Var> {
    let keep: Option<Vec<bool>> = close.map(|c| c.iter().map(|x| !x).collect());
    tape.weighted_mse(pred, target, weights, keep.as_deref())
}

/// Plain-value twin of [`weighted_mse`] returning `(weighted sum, N)`.
pub fn weighted_sq_error(pred: &[[f64; 2]], target: &[[f64; 2]], weights: [f64; 2], close: Option<&[bool]>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        if close.is_some_and(|c| c[i]) {
            continue;
        }
        sum += weights[0] * (p[0] - t[0]).powi(2) + weights[1] * (p[1] - t[1]).powi(2);
        n += 2;
    }
    (sum, n)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if store.iter().any(|(_, t)| t.grad.is_none()) {
        let name = store.iter().find(|(_, t)| t.grad.is_none()).map(|(n, _)| n.to_string());
        return Err(Error::Contract(format!("no gradient for parameter '{}'", name.unwrap_or_default())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in store.iter_mut() {
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let g = p.grad.take().expect("checked above");
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
        p.grad = Some(g);
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN without a validation split.
    pub val_loss: f64,
    /// Validation p_acc at 5, 10 and 15 px (downsampled space).
    pub p_acc: [f64; 3],
    /// NaN for epochs restored from a checkpoint.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,p_acc_5,p_acc_10,p_acc_15,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.p_acc[0], r.p_acc[1], r.p_acc[2], r.seconds
            );
        }
        s
    }

    /// Same as [`TrainReport::to_csv`] without the wall-clock column, so
    /// repeated runs compare equal.
    pub fn to_csv_without_time(&self) -> String {
        self.to_csv()
            .lines()
            .map(|l| format!("{}\n", l.rsplit_once(',').map_or(l, |(a, _)| a)))
            .collect()
    }
}

/// Optimizer progress carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub train_cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub store: ParameterStore,
    pub train_state: Option<TrainState>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVTK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_moments(w: &mut ByteWriter, map: &BTreeMap<String, Vec<f64>>, store: &ParameterStore) {
    w.u32(map.len() as u32);
    for (name, vals) in map {
        let shape = store.get(name).map_or(vec![vals.len()], |t| t.shape().to_vec());
        w.tensor(name, &shape, vals);
    }
}

fn read_moments(r: &mut ByteReader, store: &ParameterStore) -> Result<BTreeMap<String, Vec<f64>>> {
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        match store.get(&name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("optimizer moment '{name}' matches no parameter"))),
        }
        out.insert(name, t.into_data());
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.model.cfg.to_kv().to_text());
        w.store(&self.store);
        w.u32(self.model.bn.len() as u32);
        for (i, bn) in self.model.bn.iter().enumerate() {
            let c = bn.running_mean.len();
            w.tensor(&format!("enc.bn{i}.running_mean"), &[c], &bn.running_mean);
            w.tensor(&format!("enc.bn{i}.running_var"), &[c], &bn.running_var);
        }
        match &self.train_state {
            None => w.u8(0),
            Some(ts) => {
                w.u8(1);
                w.str(&ts.train_cfg.to_kv().to_text());
                w.u64(ts.epoch as u64);
                w.u64(ts.adam.step);
                write_moments(&mut w, &ts.adam.m, &self.store);
                write_moments(&mut w, &ts.adam.v, &self.store);
                w.u32(ts.report.epochs.len() as u32);
                for r in &ts.report.epochs {
                    w.u64(r.epoch as u64);
                    w.f64(r.train_loss);
                    w.f64(r.val_loss);
                    r.p_acc.iter().for_each(|p| w.f64(*p));
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let cfg = ModelConfig::from_kv(&KvMap::parse(&r.str()?)?)
            .map_err(|e| Error::Checkpoint(format!("embedded model config: {e}")))?;
        let store = r.store()?;
        let mut model = Model::new(&cfg)?;
        model.check_store(&store)?;
        let n_bn = r.u32()? as usize;
        if n_bn != model.bn.len() {
            return Err(Error::Checkpoint(format!("{n_bn} batch-norm buffers, config has {}", model.bn.len())));
        }
        for (i, bn) in model.bn.iter_mut().enumerate() {
            for (want, slot) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let (name, t) = r.tensor()?;
                if name != format!("enc.bn{i}.{want}") || t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!("unexpected buffer '{name}' {:?}", t.shape())));
                }
                *slot = t.into_data();
            }
        }
        let train_state = match r.u8()? {
            0 => None,
            1 => {
                let train_cfg = TrainConfig::from_kv(&KvMap::parse(&r.str()?)?)
                    .map_err(|e| Error::Checkpoint(format!("embedded train config: {e}")))?;
                let epoch = r.u64()? as usize;
                let step = r.u64()?;
                let m = read_moments(&mut r, &store)?;
                let v = read_moments(&mut r, &store)?;
                let n = r.u32()?;
                let mut epochs = Vec::new();
                for _ in 0..n {
                    let ep = r.u64()? as usize;
                    let train_loss = r.f64()?;
                    let val_loss = r.f64()?;
                    let p_acc = [r.f64()?, r.f64()?, r.f64()?];
                    epochs.push(EpochRecord {
                        epoch: ep,
                        train_loss,
                        val_loss,
                        p_acc,
                        seconds: f64::NAN,
                    });
                }
                Some(TrainState {
                    train_cfg,
                    epoch,
                    adam: AdamState { step, m, v },
                    report: TrainReport { epochs },
                })
            }
            f => return Err(Error::Checkpoint(format!("bad train-state flag {f}"))),
        };
        if !r.is_at_end() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            model,
            store,
            train_state,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Deterministic `(train, val)` index split.
pub fn split_indices(n: usize, val_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let n_val = (n as f64 * val_split).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

// keeps the split stream apart from the per-epoch streams
const SPLIT_STREAM: u64 = 0x5eed_0005_0117;

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

fn flat_targets(windows: &[&SampleWindow]) -> (Vec<f64>, Vec<bool>) {
    let len = windows[0].len;
    let mut t = Vec::with_capacity(len * windows.len() * 2);
    let mut c = Vec::with_capacity(len * windows.len());
    for l in 0..len {
        for w in windows {
            t.extend_from_slice(&w.targets[l]);
            c.push(w.close_mask[l]);
        }
    }
    (t, c)
}

/// Forward, loss, backward, clip and Adam update on one batch. Returns the
/// batch loss before the update.
pub fn train_step<R: rand::Rng + ?Sized>(
    model: &mut Model,
    store: &mut ParameterStore,
    adam: &mut AdamState,
    batch: &[&SampleWindow],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let (frames, len, b) = batch_frames(batch)?;
    let (targets, close) = flat_targets(batch);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &frames, len, b, Mode::Train, rng)?;
    let loss = weighted_mse(&mut tape, out.coords, &targets, cfg.loss_weights, cfg.use_close_mask.then_some(&close[..]))?;
    let value = tape.value(loss)[0];
    store.zero_grads();
    tape.backward_into(loss, store)?;
    clip_grad_norm(store, cfg.clip_norm);
    adam_step(store, adam, cfg.learning_rate)?;
    Ok(value)
}

/// Eval-mode loss and p_acc over `windows`; NaN when empty or fully masked.
pub fn validate(model: &Model, store: &ParameterStore, windows: &[SampleWindow], cfg: &TrainConfig) -> Result<(f64, [f64; 3])> {
    if windows.is_empty() {
        return Ok((f64::NAN, [f64::NAN; 3]));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for w in windows {
        let pred = model.predict_window(store, w)?;
        let (s, k) = weighted_sq_error(&pred, &w.targets, cfg.loss_weights, cfg.use_close_mask.then_some(&w.close_mask[..]));
        sum += s;
        n += k;
    }
    let opts = EvalOptions {
        pixel_space: PixelSpace::Downsampled,
        exclude_closed: cfg.use_close_mask,
        ..EvalOptions::default()
    };
    let (pred, gt) = collect_points(model, store, windows, &opts)?;
    if n == 0 || pred.is_empty() {
        return Ok((f64::NAN, [f64::NAN; 3]));
    }
    let acc = pixel_accuracy(&pred, &gt, &DEFAULT_TOLERANCES)?;
    Ok((sum / n as f64, [acc[0].1, acc[1].1, acc[2].1]))
}

/// Where checkpoints go while training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
}

impl CheckpointSink {
    pub fn final_path(&self) -> PathBuf {
        self.dir.join("model.evtk")
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.evtk"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains from a fresh initialization of `model_cfg`.
pub fn train(
    model_cfg: &ModelConfig,
    data: &[SampleWindow],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    let (model, store) = build_model(model_cfg)?;
    let start = Checkpoint {
        model,
        store,
        train_state: Some(TrainState {
            train_cfg: cfg.clone(),
            epoch: 0,
            adam: AdamState::default(),
            report: TrainReport::default(),
        }),
    };
    resume(start, data, cfg, sink)
}

/// Continues `ckpt` until `cfg.epochs` epochs are complete. Per-epoch random
/// streams depend only on the seed and the epoch index, so a resumed run
/// matches an uninterrupted one bit for bit.
pub fn resume(ckpt: Checkpoint, data: &[SampleWindow], cfg: &TrainConfig, sink: Option<&CheckpointSink>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("no training windows".into()));
    }
    let Checkpoint {
        mut model,
        mut store,
        train_state,
    } = ckpt;
    let TrainState {
        epoch: done,
        mut adam,
        mut report,
        ..
    } = train_state.ok_or_else(|| Error::Checkpoint("checkpoint has no training state to resume".into()))?;
    if done > cfg.epochs {
        return Err(Error::Config(format!("checkpoint already has {done} epochs, more than the {} requested", cfg.epochs)));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_split, cfg.seed);
    if train_idx.len() < 2 {
        return Err(Error::Contract(format!("{} training windows; need at least 2", train_idx.len())));
    }
    let val: Vec<SampleWindow> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let mut order = train_idx;
    order.sort_unstable();

    for epoch in done + 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&SampleWindow> = chunk.iter().map(|&i| &data[i]).collect();
            match train_step(&mut model, &mut store, &mut adam, &batch, cfg, &mut rng) {
                Ok(l) => losses.push(l),
                // every step in this batch is masked closed
                Err(Error::DegenerateLoss) => {}
                Err(e) => return Err(e),
            }
        }
        let train_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let (val_loss, p_acc) = validate(&model, &store, &val, cfg)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            p_acc,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let Some(sink) = sink {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                let c = snapshot(&model, &store, cfg, epoch, &adam, &report);
                save_checkpoint(sink.epoch_path(epoch), &c)?;
            }
        }
    }
    let checkpoint = snapshot(&model, &store, cfg, cfg.epochs, &adam, &report);
    if let Some(sink) = sink {
        save_checkpoint(sink.final_path(), &checkpoint)?;
    }
    Ok(TrainOutcome { checkpoint, report })
}

fn snapshot(model: &Model, store: &ParameterStore, cfg: &TrainConfig, epoch: usize, adam: &AdamState, report: &TrainReport) -> Checkpoint {
    let mut store = store.clone();
    store.zero_grads();
    Checkpoint {
        model: model.clone(),
        store,
        train_state: Some(TrainState {
            train_cfg: cfg.clone(),
            epoch,
            adam: adam.clone(),
            report: report.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn mse(pred: &[f64], target: &[f64], w: [f64; 2], close: Option<&[bool]>) -> Result<f64> {
        let mut t = Tape::new();
        let p = t.constant(&[pred.len() / 2, 2], pred.to_vec())?;
        let l = weighted_mse(&mut t, p, target, w, close)?;
        Ok(t.value(l)[0])
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse(&[0.3, 0.4], &[0.3, 0.4], [2.0, 5.0], None).unwrap(), 0.0);
        assert_eq!(mse(&[2.0, 0.0], &[0.0, 0.0], [1.0, 1.0], None).unwrap(), 2.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0], [2.0, 1.0], None).unwrap(), 3.0);
    }

    #[test]
    fn closed_rows_excluded_and_all_closed_is_degenerate() {
        let l = mse(&[1.0, 1.0, 9.0, 9.0], &[0.0; 4], [1.0, 1.0], Some(&[false, true])).unwrap();
        assert_eq!(l, 1.0);
        assert!(matches!(mse(&[1.0, 1.0], &[0.0; 2], [1.0, 1.0], Some(&[true])), Err(Error::DegenerateLoss)));
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut st = AdamState::default();
        st.m.insert("w".into(), vec![0.5, 0.5]);
        st.v.insert("w".into(), vec![0.25, 0.25]);
        s.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        // non-zero moments still move the weights; the moments themselves decay
        assert_eq!(st.m["w"], vec![0.45, 0.45]);
        assert_eq!(st.v["w"], vec![0.25 * 0.999, 0.25 * 0.999]);

        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        let mut st = AdamState::default();
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = Some(vec![0.5, -2.0, 1e-3]);
        let mut st = AdamState::default();
        adam_step(&mut s, &mut st, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        for (w, g) in s.get("w").unwrap().data().iter().zip([0.5f64, -2.0, 1e-3]) {
            let want = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((w - want).abs() <= 1e-15, "{w} vs {want}");
        }
    }

    #[test]
    fn adam_requires_every_gradient() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(adam_step(&mut s, &mut AdamState::default(), 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 1, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { loss_weights: [0.0, 0.0], ..ok.clone() },
            TrainConfig { loss_weights: [-1.0, 1.0], ..ok.clone() },
            TrainConfig { val_split: 0.6, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainConfig {
            loss_weights: [2.0, 0.5],
            use_close_mask: true,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn split_is_seeded_partition() {
        let (a, b) = split_indices(10, 0.2, 3);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.2, 3), (a, b));
    }
}
