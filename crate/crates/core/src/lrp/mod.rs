//! Layer-wise relevance propagation: LRP-0, ε and γ rules on dense, conv and
//! pooling layers, batch-norm canonization, signal-take-all through LSTM/GRU
//! cells, and heatmap export.

mod explain;
mod heatmap;

pub use explain::{
    explain, forward_cache, occlusion_effect, ExplainTarget, ForwardCache, RelevanceMap, TargetOutput, TraceEntry,
};
pub use heatmap::{export_heatmap, heatmap_csv, heatmap_pgm, HeatmapFormat};

use std::fmt;
use std::str::FromStr;

use crate::autodiff::kernels::{
    avg_pool_backward, avg_pool_forward, conv2d_backward_input, conv2d_forward, linear_forward, ConvGeometry, Dims4,
};
use crate::autodiff::{BatchNormState, CellKind};
use crate::error::{Error, Result};

/// Below this, an ε = 0 denominator counts as zero.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// `z' = Σ x·(w + γ·w⁺) + (b + γ·b⁺)`, divided by `z' + ε·sign(z')`.
/// LRP-0 is γ = ε = 0; the ε-rule is γ = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rule {
    pub gamma: f64,
    pub eps: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.25;

impl Rule {
    pub const LRP0: Rule = Rule { gamma: 0.0, eps: 0.0 };

    pub fn epsilon(eps: f64) -> Self {
        Rule { gamma: 0.0, eps }
    }

    /// γ-rule with an ε stabilizer.
    pub fn gamma(gamma: f64, eps: f64) -> Self {
        Rule { gamma, eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("epsilon must be ≥ 0, got {}", self.eps)));
        }
        Ok(())
    }

    fn modify(&self, w: f64) -> f64 {
        w + self.gamma * w.max(0.0)
    }

    fn stabilize(&self, z: f64, r: f64, layer: &str, unit: usize) -> Result<f64> {
        if r == 0.0 {
            return Ok(0.0);
        }
        if self.eps == 0.0 && z.abs() <= SINGULAR_TOLERANCE {
            return Err(Error::SingularDenominator {
                layer: layer.to_string(),
                unit,
                value: z,
            });
        }
        let sign = if z >= 0.0 { 1.0 } else { -1.0 };
        Ok(r / (z + self.eps * sign))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.gamma, self.eps) {
            (g, e) if g == 0.0 && e == 0.0 => f.write_str("lrp0"),
            (0.0, e) => write!(f, "epsilon:{e}"),
            (g, e) => write!(f, "gamma:{g}:{e}"),
        }
    }
}

impl FromStr for Rule {
    type Err = Error;

    /// `lrp0`, `epsilon[:ε]` or `gamma[:γ[:ε]]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or("");
        let nums: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|e| Error::Config(format!("rule '{s}': {e}"))))
            .collect::<Result<_>>()?;
        let rule = match (head, nums.as_slice()) {
            ("lrp0", []) => Rule::LRP0,
            ("epsilon", []) => Rule::epsilon(DEFAULT_EPSILON),
            ("epsilon", [e]) => Rule::epsilon(*e),
            ("gamma", []) => Rule::gamma(DEFAULT_GAMMA, DEFAULT_EPSILON),
            ("gamma", [g]) => Rule::gamma(*g, DEFAULT_EPSILON),
            ("gamma", [g, e]) => Rule::gamma(*g, *e),
            _ => return Err(Error::Config(format!("unknown rule '{s}' (expected lrp0, epsilon[:e] or gamma[:g[:e]])"))),
        };
        if head == "epsilon" && rule.eps <= 0.0 {
            return Err(Error::Config("the epsilon rule needs ε > 0".into()));
        }
        rule.validate()?;
        Ok(rule)
    }
}

/// Rule per layer class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    pub conv: Rule,
    pub pool: Rule,
    /// Encoder linear layer.
    pub linear: Rule,
    pub recurrent: Rule,
    pub head: Rule,
}

pub const LAYER_CLASSES: [&str; 5] = ["conv", "pool", "linear", "recurrent", "head"];

impl RuleConfig {
    pub fn uniform(rule: Rule) -> Self {
        RuleConfig {
            conv: rule,
            pool: rule,
            linear: rule,
            recurrent: rule,
            head: rule,
        }
    }

    /// ε on everything above the convolutions, γ on the convolutions.
    pub fn composite(eps: f64, gamma: f64) -> Self {
        RuleConfig {
            conv: Rule::gamma(gamma, eps),
            ..RuleConfig::uniform(Rule::epsilon(eps))
        }
    }

    /// `lrp0`, `epsilon`, `gamma` or `composite`, using `eps` and `gamma`
    /// where the preset needs them.
    pub fn preset(name: &str, eps: f64, gamma: f64) -> Result<Self> {
        let c = match name {
            "lrp0" => RuleConfig::uniform(Rule::LRP0),
            "epsilon" => {
                if eps <= 0.0 {
                    return Err(Error::Config("the epsilon rule needs ε > 0".into()));
                }
                RuleConfig::uniform(Rule::epsilon(eps))
            }
            "gamma" => RuleConfig::uniform(Rule::gamma(gamma, eps)),
            "composite" => RuleConfig::composite(eps, gamma),
            _ => {
                return Err(Error::Config(format!(
                    "unknown rule preset '{name}' (expected lrp0, epsilon, gamma or composite)"
                )))
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        [self.conv, self.pool, self.linear, self.recurrent, self.head]
            .iter()
            .try_for_each(Rule::validate)
    }

    /// Overrides one layer class, e.g. `("conv", "epsilon:1e-9")`.
    pub fn set(&mut self, class: &str, rule: Rule) -> Result<()> {
        let slot = match class {
            "conv" => &mut self.conv,
            "pool" => &mut self.pool,
            "linear" => &mut self.linear,
            "recurrent" => &mut self.recurrent,
            "head" => &mut self.head,
            other => return Err(Error::UnsupportedLayer(other.to_string())),
        };
        *slot = rule;
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "conv={} pool={} linear={} recurrent={} head={}",
            self.conv, self.pool, self.linear, self.recurrent, self.head
        )
    }
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig::composite(DEFAULT_EPSILON, DEFAULT_GAMMA)
    }
}

/// Relevance of `x: [n_in]` for one sample through `y = W x + b`,
/// `W: [n_out, n_in]`. Bias relevance is absorbed.
#[allow(clippy::too_many_arguments)]
pub fn lrp_linear(
    r_out: &[f64],
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    n_in: usize,
    n_out: usize,
    rule: Rule,
    layer: &str,
) -> Result<Vec<f64>> {
    if r_out.len() != n_out || x.len() != n_in || weight.len() != n_in * n_out || bias.is_some_and(|b| b.len() != n_out) {
        return Err(Error::shape("lrp_linear", format!("R {} / x {} / W {} for {n_out}×{n_in}", r_out.len(), x.len(), weight.len())));
    }
    let w: Vec<f64> = weight.iter().map(|&v| rule.modify(v)).collect();
    let b: Option<Vec<f64>> = bias.map(|b| b.iter().map(|&v| rule.modify(v)).collect());
    let z = linear_forward(x, &w, b.as_deref(), 1, n_in, n_out);
    let mut r_in = vec![0.0; n_in];
    for k in 0..n_out {
        let s = rule.stabilize(z[k], r_out[k], layer, k)?;
        if s == 0.0 {
            continue;
        }
        let wr = &w[k * n_in..(k + 1) * n_in];
        for j in 0..n_in {
            r_in[j] += x[j] * wr[j] * s;
        }
    }
    Ok(r_in)
}

/// Relevance through a convolution treated as its equivalent linear map.
pub fn lrp_conv(
    r_out: &[f64],
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
    rule: Rule,
    layer: &str,
) -> Result<Vec<f64>> {
    let out = g
        .output()
        .ok_or_else(|| Error::shape("lrp_conv", format!("input {:?} and kernel {:?}", g.input, g.kernel)))?;
    let n_out: usize = out.iter().product();
    let n_in: usize = g.input.iter().product();
    if r_out.len() != n_out || x.len() != n_in || weight.len() != g.kernel.iter().product::<usize>() {
        return Err(Error::shape("lrp_conv", format!("R {} / x {} for output {out:?}", r_out.len(), x.len())));
    }
    let w: Vec<f64> = weight.iter().map(|&v| rule.modify(v)).collect();
    let b: Option<Vec<f64>> = bias.map(|b| b.iter().map(|&v| rule.modify(v)).collect());
    let z = conv2d_forward(x, &w, b.as_deref(), g);
    let s = z
        .iter()
        .zip(r_out)
        .enumerate()
        .map(|(k, (&z, &r))| rule.stabilize(z, r, layer, k))
        .collect::<Result<Vec<_>>>()?;
    let c = conv2d_backward_input(&s, &w, g);
    Ok(x.iter().zip(&c).map(|(a, b)| a * b).collect())
}

/// Relevance through a `k×k` average pool (trailing cells outside any window
/// get none), contributions `x/k²`.
pub fn lrp_avg_pool(r_out: &[f64], x: &[f64], input: Dims4, k: usize, rule: Rule, layer: &str) -> Result<Vec<f64>> {
    if k == 0 || x.len() != input.iter().product::<usize>() {
        return Err(Error::shape("lrp_avg_pool", format!("x {} for {input:?}, k = {k}", x.len())));
    }
    let z = avg_pool_forward(x, input, k);
    if r_out.len() != z.len() {
        return Err(Error::shape("lrp_avg_pool", format!("R {} for {} pooled cells", r_out.len(), z.len())));
    }
    // a uniform positive weight: γ scales numerator and denominator alike
    let s = z
        .iter()
        .zip(r_out)
        .enumerate()
        .map(|(i, (&z, &r))| Rule::epsilon(rule.eps).stabilize(z, r, layer, i))
        .collect::<Result<Vec<_>>>()?;
    let c = avg_pool_backward(&s, input, k);
    Ok(x.iter().zip(&c).map(|(a, b)| a * b).collect())
}

/// Splits `r` over additive `parts` (plus an absorbed `bias`) with the ε-rule.
pub fn split_sum(r: f64, parts: &[f64], bias: f64, eps: f64, layer: &str, unit: usize) -> Result<Vec<f64>> {
    let z = parts.iter().sum::<f64>() + bias;
    let s = Rule::epsilon(eps).stabilize(z, r, layer, unit)?;
    Ok(parts.iter().map(|p| p * s).collect())
}

/// Folds eval-mode batch norm into the preceding conv/linear layer:
/// `w' = w·γ/s`, `b' = (b − μ)·γ/s + β`, `s = √(σ² + eps)`. `weight` has
/// `channels` equal leading blocks.
pub fn canonize_batch_norm(
    weight: &[f64],
    bias: Option<&[f64]>,
    channels: usize,
    bn_gamma: &[f64],
    bn_beta: &[f64],
    state: &BatchNormState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lens = [bn_gamma.len(), bn_beta.len(), state.running_mean.len(), state.running_var.len()];
    if channels == 0 || lens.iter().any(|&l| l != channels) || bias.is_some_and(|b| b.len() != channels) {
        return Err(Error::Contract(format!(
            "batch-norm statistics {lens:?} do not cover {channels} channels"
        )));
    }
    if !weight.len().is_multiple_of(channels) {
        return Err(Error::shape("canonize_batch_norm", format!("{} weights for {channels} channels", weight.len())));
    }
    if state.running_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Contract("batch-norm running variance is not a valid eval statistic".into()));
    }
    let per = weight.len() / channels;
    let mut w = weight.to_vec();
    let mut b = vec![0.0; channels];
    for c in 0..channels {
        let scale = bn_gamma[c] / (state.running_var[c] + state.eps).sqrt();
        w[c * per..(c + 1) * per].iter_mut().for_each(|v| *v *= scale);
        b[c] = (bias.map_or(0.0, |b| b[c]) - state.running_mean[c]) * scale + bn_beta[c];
    }
    Ok((w, b))
}

/// Cached values of one recurrent step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// LSTM only.
    pub c_prev: Vec<f64>,
    /// Gate activations in [`CellKind::gates`] order (`g` and `n` after tanh).
    pub gates: Vec<Vec<f64>>,
    /// GRU only: `U_n h`.
    pub un_h: Vec<f64>,
}

/// Parameters of the signal branch: `g` for LSTM, `n` for GRU.
#[derive(Debug, Clone, Copy)]
pub struct SignalWeights<'a> {
    /// `[hidden, n_in]`
    pub w: &'a [f64],
    /// `[hidden, hidden]`
    pub u: &'a [f64],
    pub b: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRelevance {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    /// Zero for GRU.
    pub c: Vec<f64>,
}

/// One recurrent step backwards. Products of a gate and a signal hand all
/// relevance to the signal; the remaining sums use `rule`. `r_h`, `r_c` are
/// the relevance on h' and c' (`r_c` is ignored for GRU).
pub fn lrp_recurrent_cell(
    kind: CellKind,
    cell: &CellCache,
    weights: &SignalWeights<'_>,
    r_h: &[f64],
    r_c: &[f64],
    rule: Rule,
    layer: &str,
) -> Result<CellRelevance> {
    let hidden = r_h.len();
    let n_in = cell.x.len();
    let gates_ok = cell.gates.len() == kind.gates().len() && cell.gates.iter().all(|g| g.len() == hidden);
    let state_ok = cell.h_prev.len() == hidden
        && match kind {
            CellKind::Lstm => cell.c_prev.len() == hidden && r_c.len() == hidden,
            CellKind::Gru => cell.un_h.len() == hidden,
        };
    if !gates_ok || !state_ok || weights.w.len() != hidden * n_in || weights.u.len() != hidden * hidden || weights.b.len() != hidden {
        return Err(Error::shape("lrp_recurrent_cell", format!("cache or weights do not match hidden {hidden}, input {n_in}")));
    }
    match kind {
        CellKind::Lstm => {
            let (i, f, g) = (&cell.gates[0], &cell.gates[1], &cell.gates[2]);
            let mut r_c_prev = vec![0.0; hidden];
            let mut r_g = vec![0.0; hidden];
            for k in 0..hidden {
                // h' = o·tanh(c'): everything on h' moves to c'
                let parts = split_sum(r_h[k] + r_c[k], &[f[k] * cell.c_prev[k], i[k] * g[k]], 0.0, rule.eps, &format!("{layer}.c"), k)?;
                r_c_prev[k] = parts[0];
                r_g[k] = parts[1];
            }
            // g = tanh(W_g x + U_g h + b_g) over the joint input [x; h]
            let mut joint = Vec::with_capacity(hidden * (n_in + hidden));
            for k in 0..hidden {
                joint.extend_from_slice(&weights.w[k * n_in..(k + 1) * n_in]);
                joint.extend_from_slice(&weights.u[k * hidden..(k + 1) * hidden]);
            }
            let xh: Vec<f64> = cell.x.iter().chain(&cell.h_prev).copied().collect();
            let r_xh = lrp_linear(&r_g, &xh, &joint, Some(weights.b), n_in + hidden, hidden, rule, &format!("{layer}.g"))?;
            Ok(CellRelevance {
                x: r_xh[..n_in].to_vec(),
                h: r_xh[n_in..].to_vec(),
                c: r_c_prev,
            })
        }
        CellKind::Gru => {
            let (z, r, n) = (&cell.gates[0], &cell.gates[1], &cell.gates[2]);
            let mut r_x = vec![0.0; n_in];
            let mut r_h_prev = vec![0.0; hidden];
            let mut r_u = vec![0.0; hidden];
            for k in 0..hidden {
                // h' = (1-z)·n + z·h
                let parts = split_sum(r_h[k], &[(1.0 - z[k]) * n[k], z[k] * cell.h_prev[k]], 0.0, rule.eps, &format!("{layer}.h"), k)?;
                r_h_prev[k] = parts[1];
                // n = tanh(W_n x + b_n + r·(U_n h)); r gates the signal U_n h
                let contrib: Vec<f64> = cell.x
                    .iter()
                    .zip(&weights.w[k * n_in..(k + 1) * n_in])
                    .map(|(a, &w)| a * rule.modify(w))
                    .collect();
                let ru = r[k] * cell.un_h[k];
                let z_n = contrib.iter().sum::<f64>() + ru + rule.modify(weights.b[k]);
                let s = rule.stabilize(z_n, parts[0], &format!("{layer}.n"), k)?;
                r_x.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c * s);
                r_u[k] = ru * s;
            }
            let via_u = lrp_linear(&r_u, &cell.h_prev, weights.u, None, hidden, hidden, rule, &format!("{layer}.u_n"))?;
            r_h_prev.iter_mut().zip(&via_u).for_each(|(a, b)| *a += b);
            Ok(CellRelevance {
                x: r_x,
                h: r_h_prev,
                c: vec![0.0; hidden],
            })
        }
    }
}
