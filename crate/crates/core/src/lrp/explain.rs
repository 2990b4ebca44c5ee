//! Whole-model explanations: an eval-mode forward pass cached layer by layer,
//! then relevance propagated from one head score back to the input pixels.

use std::fmt;
use std::str::FromStr;

use super::{canonize_batch_norm, lrp_avg_pool, lrp_conv, lrp_linear, lrp_recurrent_cell, CellCache, CellRelevance, RuleConfig, SignalWeights};
use crate::autodiff::kernels::{avg_pool_forward, conv2d_forward, linear_forward, pool_output, sigmoid, ConvGeometry, Dims4};
use crate::autodiff::{CellKind, ParameterStore, RecurrentSpec};
use crate::error::{Error, Result};
use crate::events::SampleWindow;
use crate::models::{bn_names, conv_name, Model, FC_B, FC_W, HEAD_B, HEAD_W, RNN_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetOutput {
    X,
    Y,
    /// Both coordinates seeded together.
    Sum,
}

impl TargetOutput {
    pub fn name(self) -> &'static str {
        match self {
            TargetOutput::X => "x",
            TargetOutput::Y => "y",
            TargetOutput::Sum => "sum",
        }
    }
}

impl fmt::Display for TargetOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetOutput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(TargetOutput::X),
            "y" => Ok(TargetOutput::Y),
            "sum" => Ok(TargetOutput::Sum),
            _ => Err(Error::Config(format!("unknown target '{s}' (expected x, y or sum)"))),
        }
    }
}

/// Which score to explain: output `step` of the window, seeded with the
/// pre-sigmoid score times `seed_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainTarget {
    pub output: TargetOutput,
    pub step: usize,
    pub seed_scale: f64,
}

impl ExplainTarget {
    pub fn new(output: TargetOutput, step: usize) -> Self {
        ExplainTarget {
            output,
            step,
            seed_scale: 1.0,
        }
    }
}

/// Relevance entering and leaving one propagation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub layer: String,
    /// Σ relevance on the layer's output side.
    pub r_out: f64,
    /// Σ relevance handed to the layer's inputs.
    pub r_in: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// `[L, C, H, W]`, signed.
    pub frames: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Relevance seeded on the two head scores.
    pub output_relevance: [f64; 2],
    pub step: usize,
    pub target: TargetOutput,
    pub rules: RuleConfig,
    pub trace: Vec<TraceEntry>,
}

impl RelevanceMap {
    pub fn frame_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_size();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.frames.iter().sum()
    }

    pub fn seeded(&self) -> f64 {
        self.output_relevance.iter().sum()
    }
}

#[derive(Debug, Clone)]
struct Block {
    geometry: ConvGeometry,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    /// ReLU output, the pool's input.
    relu: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
}


/// Everything the backward relevance pass needs, for one window.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<Block>,
    encoder: Vec<EncoderCache>,
    features: Vec<Vec<f64>>,
    /// `[layer][direction][t]`.
    cells: Vec<Vec<Vec<CellCache>>>,
    /// Top recurrent layer output per step.
    top: Vec<Vec<f64>>,
    /// Pre-sigmoid head scores per step.
    pub scores: Vec<[f64; 2]>,
}

impl ForwardCache {
    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.scores.iter().map(|s| [sigmoid(s[0]), sigmoid(s[1])]).collect()
    }
}

fn param<'a>(store: &'a ParameterStore, name: &str) -> Result<&'a [f64]> {
    store
        .get(name)
        .map(|t| t.data())
        .ok_or_else(|| Error::Checkpoint(format!("parameter '{name}' missing")))
}

fn canonized_blocks(model: &Model, store: &ParameterStore) -> Result<Vec<Block>> {
    let cfg = &model.cfg;
    let (mut c, mut h, mut w) = (cfg.in_channels, cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.conv_channels.len());
    for (i, (&co, &(_, ph, pw))) in cfg.conv_channels.iter().zip(&cfg.encoder_dims()).enumerate() {
        let (g, b) = bn_names(i);
        let (weight, bias) = canonize_batch_norm(
            param(store, &conv_name(i))?,
            None,
            co,
            param(store, &g)?,
            param(store, &b)?,
            &model.bn[i],
        )?;
        out.push(Block {
            geometry: ConvGeometry {
                input: [1, c, h, w],
                kernel: [co, c, cfg.kernel, cfg.kernel],
                stride: 1,
                padding: cfg.kernel / 2,
            },
            weight,
            bias,
        });
        (c, h, w) = (co, ph, pw);
    }
    Ok(out)
}

fn relu_dims(b: &Block) -> Result<Dims4> {
    b.geometry
        .output()
        .ok_or_else(|| Error::shape("explain", format!("conv geometry {:?}", b.geometry.kernel)))
}

fn gate_pre(store: &ParameterStore, p: &str, gate: &str, x: &[f64], h: &[f64], hidden: usize) -> Result<Vec<f64>> {
    let wx = linear_forward(x, param(store, &format!("{p}.w_{gate}"))?, Some(param(store, &format!("{p}.b_{gate}"))?), 1, x.len(), hidden);
    let uh = linear_forward(h, param(store, &format!("{p}.u_{gate}"))?, None, 1, hidden, hidden);
    Ok(wx.iter().zip(&uh).map(|(a, b)| a + b).collect())
}

fn cell_forward(
    store: &ParameterStore,
    p: &str,
    kind: CellKind,
    x: &[f64],
    h: &[f64],
    c: &[f64],
    hidden: usize,
) -> Result<(CellCache, Vec<f64>, Vec<f64>)> {
    let sig = |v: Vec<f64>| v.into_iter().map(sigmoid).collect::<Vec<_>>();
    let tanh = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
    match kind {
        CellKind::Lstm => {
            let i = sig(gate_pre(store, p, "i", x, h, hidden)?);
            let f = sig(gate_pre(store, p, "f", x, h, hidden)?);
            let g = tanh(gate_pre(store, p, "g", x, h, hidden)?);
            let o = sig(gate_pre(store, p, "o", x, h, hidden)?);
            let c_next: Vec<f64> = (0..hidden).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
            let h_next: Vec<f64> = (0..hidden).map(|k| o[k] * c_next[k].tanh()).collect();
            let cache = CellCache {
                x: x.to_vec(),
                h_prev: h.to_vec(),
                c_prev: c.to_vec(),
                gates: vec![i, f, g, o],
                un_h: Vec::new(),
            };
            Ok((cache, h_next, c_next))
        }
        CellKind::Gru => {
            let z = sig(gate_pre(store, p, "z", x, h, hidden)?);
            let r = sig(gate_pre(store, p, "r", x, h, hidden)?);
            let wx = linear_forward(x, param(store, &format!("{p}.w_n"))?, Some(param(store, &format!("{p}.b_n"))?), 1, x.len(), hidden);
            let un_h = linear_forward(h, param(store, &format!("{p}.u_n"))?, None, 1, hidden, hidden);
            let n: Vec<f64> = (0..hidden).map(|k| (wx[k] + r[k] * un_h[k]).tanh()).collect();
            let h_next: Vec<f64> = (0..hidden).map(|k| n[k] + z[k] * (h[k] - n[k])).collect();
            let cache = CellCache {
                x: x.to_vec(),
                h_prev: h.to_vec(),
                c_prev: Vec::new(),
                gates: vec![z, r, n],
                un_h,
            };
            Ok((cache, h_next, Vec::new()))
        }
    }
}

/// Eval-mode forward pass of one window with batch norm folded into the
/// convolutions. The scores agree with [`Model::predict`] up to rounding.
pub fn forward_cache(model: &Model, store: &ParameterStore, window: &SampleWindow) -> Result<ForwardCache> {
    let cfg = &model.cfg;
    model.check_store(store)?;
    if window.len == 0 || window.frames.len() != window.len * model.frame_size() {
        return Err(Error::shape(
            "explain",
            format!(
                "window of {} frames {}×{} does not match the model's {}×{}×{} input",
                window.len, window.width, window.height, cfg.in_channels, cfg.width, cfg.height
            ),
        ));
    }
    let blocks = canonized_blocks(model, store)?;
    let fs = model.frame_size();
    let flat_dim = cfg.flat_dim();
    let mut encoder = Vec::with_capacity(window.len);
    let mut features = Vec::with_capacity(window.len);
    for l in 0..window.len {
        let mut x = window.frames[l * fs..(l + 1) * fs].to_vec();
        let mut caches = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let relu: Vec<f64> = conv2d_forward(&x, &b.weight, Some(&b.bias), &b.geometry)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let pooled = avg_pool_forward(&relu, relu_dims(b)?, 2);
            caches.push(BlockCache { input: x, relu });
            x = pooled;
        }
        let feature = linear_forward(&x, param(store, FC_W)?, Some(param(store, FC_B)?), 1, flat_dim, cfg.feature_dim);
        encoder.push(EncoderCache { blocks: caches, flat: x });
        features.push(feature);
    }

    let spec = cfg.recurrent_spec();
    let hidden = spec.hidden;
    let mut inputs = features.clone();
    let mut cells = Vec::with_capacity(spec.layers);
    for layer in 0..spec.layers {
        let mut per_dir = Vec::with_capacity(spec.directions());
        let mut outs = Vec::with_capacity(spec.directions());
        for dir in 0..spec.directions() {
            let p = RecurrentSpec::cell_prefix(RNN_PREFIX, layer, dir);
            let mut h = vec![0.0; hidden];
            let mut c = vec![0.0; hidden];
            let mut cache: Vec<Option<CellCache>> = vec![None; window.len];
            let mut out = vec![Vec::new(); window.len];
            for t in time_order(dir, window.len) {
                let (cc, hn, cn) = cell_forward(store, &p, spec.cell, &inputs[t], &h, &c, hidden)?;
                cache[t] = Some(cc);
                out[t] = hn.clone();
                (h, c) = (hn, cn);
            }
            per_dir.push(cache.into_iter().map(|c| c.expect("every step visited")).collect());
            outs.push(out);
        }
        inputs = (0..window.len).map(|t| outs.iter().flat_map(|o| o[t].iter().copied()).collect()).collect();
        cells.push(per_dir);
    }
    let out_dim = spec.output_dim();
    let scores = inputs
        .iter()
        .map(|h| {
            let s = linear_forward(h, param(store, HEAD_W)?, Some(param(store, HEAD_B)?), 1, out_dim, 2);
            Ok([s[0], s[1]])
        })
        .collect::<Result<_>>()?;
    Ok(ForwardCache {
        blocks,
        encoder,
        features,
        cells,
        top: inputs,
        scores,
    })
}

fn time_order(dir: usize, len: usize) -> Box<dyn Iterator<Item = usize>> {
    if dir == 0 {
        Box::new(0..len)
    } else {
        Box::new((0..len).rev())
    }
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

struct Propagator<'a> {
    store: &'a ParameterStore,
    rules: RuleConfig,
    trace: Vec<TraceEntry>,
}

impl Propagator<'_> {
    fn record(&mut self, layer: String, r_out: f64, r_in: f64) {
        self.trace.push(TraceEntry { layer, r_out, r_in });
    }

    fn recurrent(&mut self, cache: &ForwardCache, spec: &RecurrentSpec, mut r_out: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let len = r_out.len();
        let hidden = spec.hidden;
        for layer in (0..spec.layers).rev() {
            let n_in = spec.layer_input(layer);
            let mut r_in = vec![vec![0.0; n_in]; len];
            for dir in 0..spec.directions() {
                let p = RecurrentSpec::cell_prefix(RNN_PREFIX, layer, dir);
                let mut r_h = vec![0.0; hidden];
                let mut r_c = vec![0.0; hidden];
                let order: Vec<usize> = time_order(dir, len).collect();
                for &t in order.iter().rev() {
                    let cc = &cache.cells[layer][dir][t];
                    let own = &r_out[t][dir * hidden..(dir + 1) * hidden];
                    r_h.iter_mut().zip(own).for_each(|(a, b)| *a += b);
                    let incoming = sum(&r_h) + sum(&r_c);
                    let signal = if spec.cell == CellKind::Lstm { "g" } else { "n" };
                    let weights = SignalWeights {
                        w: param(self.store, &format!("{p}.w_{signal}"))?,
                        u: param(self.store, &format!("{p}.u_{signal}"))?,
                        b: param(self.store, &format!("{p}.b_{signal}"))?,
                    };
                    let CellRelevance { x: r_x, h: r_hp, c: r_cp } =
                        lrp_recurrent_cell(spec.cell, cc, &weights, &r_h, &r_c, self.rules.recurrent, &p)?;
                    self.record(format!("{p}.t{t}"), incoming, sum(&r_x) + sum(&r_hp) + sum(&r_cp));
                    r_in[t].iter_mut().zip(&r_x).for_each(|(a, b)| *a += b);
                    (r_h, r_c) = (r_hp, r_cp);
                }
                // whatever reaches the zero initial state is recorded for the
                // conservation bookkeeping
                self.record(format!("{p}.init"), sum(&r_h) + sum(&r_c), 0.0);
            }
            r_out = r_in;
        }
        Ok(r_out)
    }

    fn encoder(&mut self, model: &Model, cache: &ForwardCache, t: usize, r_feature: &[f64]) -> Result<Vec<f64>> {
        let cfg = &model.cfg;
        let enc = &cache.encoder[t];
        let mut r = lrp_linear(
            r_feature,
            &enc.flat,
            param(self.store, FC_W)?,
            Some(param(self.store, FC_B)?),
            cfg.flat_dim(),
            cfg.feature_dim,
            self.rules.linear,
            "enc.fc",
        )?;
        self.record(format!("enc.fc.t{t}"), sum(r_feature), sum(&r));
        for (i, (b, bc)) in cache.blocks.iter().zip(&enc.blocks).enumerate().rev() {
            let dims = relu_dims(b)?;
            debug_assert_eq!(r.len(), pool_output(dims, 2).iter().product::<usize>());
            let r_relu = lrp_avg_pool(&r, &bc.relu, dims, 2, self.rules.pool, &format!("enc.pool{i}"))?;
            self.record(format!("enc.pool{i}.t{t}"), sum(&r), sum(&r_relu));
            // ReLU passes relevance through unchanged
            let r_in = lrp_conv(&r_relu, &bc.input, &b.weight, Some(&b.bias), &b.geometry, self.rules.conv, &format!("enc.conv{i}"))?;
            self.record(format!("enc.conv{i}.t{t}"), sum(&r_relu), sum(&r_in));
            r = r_in;
        }
        Ok(r)
    }
}

/// Relevance of every input pixel of `window` for one head score.
pub fn explain(
    model: &Model,
    store: &ParameterStore,
    window: &SampleWindow,
    target: ExplainTarget,
    rules: &RuleConfig,
) -> Result<RelevanceMap> {
    rules.validate()?;
    if target.step >= window.len {
        return Err(Error::Contract(format!(
            "output step {} out of range for a window of {} frames",
            target.step, window.len
        )));
    }
    if !target.seed_scale.is_finite() {
        return Err(Error::Contract("seed scale must be finite".into()));
    }
    let cache = forward_cache(model, store, window)?;
    let cfg = &model.cfg;
    let spec = cfg.recurrent_spec();
    let score = cache.scores[target.step];
    let seed = match target.output {
        TargetOutput::X => [score[0], 0.0],
        TargetOutput::Y => [0.0, score[1]],
        TargetOutput::Sum => score,
    }
    .map(|v| v * target.seed_scale);

    let mut prop = Propagator {
        store,
        rules: *rules,
        trace: Vec::new(),
    };
    let out_dim = spec.output_dim();
    let r_top = lrp_linear(
        &seed,
        &cache.top[target.step],
        param(store, HEAD_W)?,
        Some(param(store, HEAD_B)?),
        out_dim,
        2,
        rules.head,
        "head",
    )?;
    prop.record("head".into(), sum(&seed), sum(&r_top));
    let mut r_out = vec![vec![0.0; out_dim]; window.len];
    r_out[target.step] = r_top;
    let r_features = prop.recurrent(&cache, &spec, r_out)?;

    let fs = model.frame_size();
    let mut frames = vec![0.0; window.len * fs];
    for (t, r_f) in r_features.iter().enumerate() {
        if r_f.iter().all(|&v| v == 0.0) {
            continue;
        }
        debug_assert_eq!(r_f.len(), cache.features[t].len());
        let r = prop.encoder(model, &cache, t, r_f)?;
        frames[t * fs..(t + 1) * fs].copy_from_slice(&r);
    }
    Ok(RelevanceMap {
        frames,
        len: window.len,
        channels: cfg.in_channels,
        height: cfg.height,
        width: cfg.width,
        output_relevance: seed,
        step: target.step,
        target: target.output,
        rules: *rules,
        trace: prop.trace,
    })
}

/// Occlusion check: zeroes the `fraction` of active (non-zero) pixels with
/// the largest and with the smallest |relevance| and returns the absolute
/// change of the explained score in each case, `(most, least)`.
pub fn occlusion_effect(
    model: &Model,
    store: &ParameterStore,
    window: &SampleWindow,
    map: &RelevanceMap,
    fraction: f64,
) -> Result<(f64, f64)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Config(format!("occlusion fraction must be in (0, 0.5], got {fraction}")));
    }
    if map.frames.len() != window.frames.len() {
        return Err(Error::shape("occlusion_effect", "relevance map does not match the window"));
    }
    let mut active: Vec<usize> = (0..window.frames.len()).filter(|&i| window.frames[i] != 0.0).collect();
    if active.is_empty() {
        return Ok((0.0, 0.0));
    }
    active.sort_by(|&a, &b| map.frames[b].abs().total_cmp(&map.frames[a].abs()).then(a.cmp(&b)));
    let n = ((active.len() as f64 * fraction).round() as usize).max(1);
    let score = |w: &SampleWindow| -> Result<f64> {
        let s = forward_cache(model, store, w)?.scores[map.step];
        Ok(match map.target {
            TargetOutput::X => s[0],
            TargetOutput::Y => s[1],
            TargetOutput::Sum => s[0] + s[1],
        })
    };
    let base = score(window)?;
    let occluded = |idx: &[usize]| -> Result<f64> {
        let mut w = window.clone();
        idx.iter().for_each(|&i| w.frames[i] = 0.0);
        Ok((score(&w)? - base).abs())
    };
    Ok((occluded(&active[..n])?, occluded(&active[active.len() - n..])?))
}
