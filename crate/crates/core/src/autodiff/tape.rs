//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every layer call appends a node holding its output and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a valid topological order.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeometry, Dims4};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        k: usize,
        input: Dims4,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        n: usize,
        c: usize,
        inner: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        offset: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Sum(Var),
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    WeightedMse {
        pred: Var,
        target: Vec<f64>,
        weights: [f64; 2],
        mask: Vec<f64>,
        count: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// A single-threaded recording of one computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<Dims4> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected a 4-d tensor, got {shape:?}"))),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// A constant leaf without gradient tracking.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(t))
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shapes are consistent")
    }

    /// Gradient of the last [`Tape::backward`] target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let input = dims4("conv2d", self.shape(x))?;
        let kernel = dims4("conv2d", self.shape(w))?;
        let geom = ConvGeometry {
            input,
            kernel,
            stride,
            padding,
        };
        let out = geom.output().ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("input {input:?} incompatible with weight {kernel:?} (stride {stride}, padding {padding})"),
            )
        })?;
        if let Some(b) = b {
            if self.shape(b) != [kernel[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for weight {kernel:?}", self.shape(b)),
                ));
            }
        }
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out.to_vec(), value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Average pooling that requires `k` to divide both spatial dims.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let input = dims4("avg_pool2d", self.shape(x))?;
        if k == 0 || input[2] % k != 0 || input[3] % k != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} does not divide {}x{}", input[2], input[3]),
            ));
        }
        self.avg_pool2d_floor(x, k)
    }

    /// Average pooling that drops trailing rows/columns not filling a window.
    pub fn avg_pool2d_floor(&mut self, x: Var, k: usize) -> Result<Var> {
        let input = dims4("avg_pool2d", self.shape(x))?;
        if k == 0 || input[2] < k || input[3] < k {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} larger than {}x{}", input[2], input[3]),
            ));
        }
        let out = kernels::pool_output(input, k);
        let value = kernels::avg_pool_forward(self.value(x), input, k);
        let rg = self.rg(x);
        Ok(self.push(out.to_vec(), value, Op::AvgPool { x, k, input }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, n_in, n_out) = match (&xs[..], &ws[..]) {
            ([batch, n], [m, n2]) if n == n2 => (*batch, *n, *m),
            _ => return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let value = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), batch, n_in, n_out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![batch, n_out],
            value,
            Op::Linear {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, value, Op::Act { x, kind }, rg)
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, in order. Two
    /// evaluations of the same graph are on the same linear piece when their
    /// patterns agree.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut p = Vec::new();
        for n in &self.nodes {
            if let Op::Act { x, kind: Activation::Relu } = n.op {
                p.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0));
            }
        }
        p
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Per-channel normalization over every axis but 1 of `[N, C, ...]`.
    ///
    /// Train mode uses batch statistics and folds them into the running
    /// averages (unbiased variance); eval mode uses the running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {shape:?} has no channel axis")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let train = mode == Mode::Train;
        if train && n * inner < 2 {
            return Err(Error::BatchTooSmall {
                op: "batch_norm",
                got: n * inner,
            });
        }
        let xv = self.value(x);
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for b in 0..n {
                for ch in 0..c {
                    let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..n {
                for ch in 0..c {
                    let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        if train {
            let mo = state.momentum;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                state.running_mean[ch] = (1.0 - mo) * state.running_mean[ch] + mo * mean[ch];
                state.running_var[ch] = (1.0 - mo) * state.running_var[ch] + mo * var[ch] * unbias;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                n,
                c,
                inner,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` so eval is identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(shape, value, Op::Dropout { x, mask }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok((self.shape(a).to_vec(), value, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let value = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut out = shape.clone();
        out[0] = len;
        let rg = self.rg(x);
        Ok(self.push(out, value, Op::SliceRows { x, offset: start * row }, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        let mut rg = false;
        for p in parts {
            if self.shape(*p)[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", self.shape(*p), self.shape(*first))));
            }
            rows += self.shape(*p)[0];
            value.extend_from_slice(self.value(*p));
            rg |= self.rg(*p);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenation of `[rows, k_i]` matrices along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            match *self.shape(*p) {
                [r, k] if r == rows => cols.push((*p, k)),
                ref s => return Err(Error::shape("concat_cols", format!("{s:?} with {rows} rows"))),
            }
        }
        let total: usize = cols.iter().map(|(_, k)| k).sum();
        let mut value = vec![0.0; rows * total];
        let mut off = 0;
        for &(p, k) in &cols {
            let src = self.value(p);
            for r in 0..rows {
                value[r * total + off..r * total + off + k].copy_from_slice(&src[r * k..(r + 1) * k]);
            }
            off += k;
        }
        let rg = cols.iter().any(|(p, _)| self.rg(*p));
        Ok(self.push(vec![rows, total], value, Op::ConcatCols { parts: cols, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot_const", format!("{} weights for {:?}", weights.len(), self.shape(x))));
        }
        let s = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Dot { x, weights: weights.to_vec() }, rg))
    }

    /// `(1/N) Σ w_c (pred - target)²` over rows with a non-zero mask, where
    /// the last axis of `pred` holds the two coordinate components and `N`
    /// counts the unmasked scalar components.
    pub fn weighted_mse(&mut self, pred: Var, target: &[f64], weights: [f64; 2], mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.last() != Some(&2) || target.len() != self.value(pred).len() {
            return Err(Error::shape(
                "weighted_mse",
                format!("pred {shape:?} vs {} target values", target.len()),
            ));
        }
        let rows = target.len() / 2;
        let mask: Vec<f64> = match mask {
            Some(m) if m.len() != rows => {
                return Err(Error::shape("weighted_mse", format!("mask of {} for {rows} rows", m.len())))
            }
            Some(m) => m.iter().map(|&keep| if keep { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; rows],
        };
        let count = 2.0 * mask.iter().sum::<f64>();
        if count == 0.0 {
            return Err(Error::DegenerateLoss);
        }
        let p = self.value(pred);
        let mut total = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for c in 0..2 {
                let d = p[2 * r + c] - target[2 * r + c];
                total += weights[c] * d * d;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![total / count],
            Op::WeightedMse {
                pred,
                target: target.to_vec(),
                weights,
                mask,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Node gradients are recomputed from scratch
    /// on each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// [`Tape::backward`], then adds every parameter gradient into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store)
    }

    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, v) in &self.params {
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter '{name}' vanished from store")))?;
            let n = t.numel();
            let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = self.grads[v.0].as_deref() {
                add_into(g, src);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, &self.nodes);
        self.grads[v.0] = Some(g);
    }

    fn acc_vec(&mut self, v: Var, contribution: Vec<f64>) {
        self.acc(v, |g, _| add_into(g, &contribution));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Take the op out so `self` can be borrowed mutably; restored below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    let gx = kernels::conv2d_backward_input(g, self.value(*w), geom);
                    self.acc_vec(*x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv2d_backward_weight(g, self.value(*x), geom);
                    self.acc_vec(*w, gw);
                }
                if let Some(b) = b {
                    let gb = kernels::channel_sums(g, geom.output().unwrap());
                    self.acc_vec(*b, gb);
                }
            }
            Op::AvgPool { x, k, input } => {
                let gx = kernels::avg_pool_backward(g, *input, *k);
                self.acc_vec(*x, gx);
            }
            Op::Linear {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            } => {
                if self.rg(*x) {
                    let gx = kernels::linear_backward_input(g, self.value(*w), *batch, *n_in, *n_out);
                    self.acc_vec(*x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::linear_backward_weight(g, self.value(*x), *batch, *n_in, *n_out);
                    self.acc_vec(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; *n_out];
                    for row in g.chunks(*n_out) {
                        add_into(&mut gb, row);
                    }
                    self.acc_vec(*b, gb);
                }
            }
            Op::Act { x, kind } => {
                let kind = *kind;
                self.acc(*x, |gx, nodes| {
                    let y = &nodes[i].value;
                    let xin = &nodes[x.0].value;
                    for j in 0..gx.len() {
                        gx[j] += g[j]
                            * match kind {
                                Activation::Relu => {
                                    if xin[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Sigmoid => y[j] * (1.0 - y[j]),
                                Activation::Tanh => 1.0 - y[j] * y[j],
                            };
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                n,
                c,
                inner,
            } => {
                let (n, c, inner) = (*n, *c, *inner);
                let m = (n * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).to_vec();
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + inner {
                                gx[j] = if *train {
                                    k / m * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch])
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    self.acc_vec(*x, gx);
                }
                self.acc_vec(*gamma, sum_gx);
                self.acc_vec(*beta, sum_g);
            }
            Op::Dropout { x, mask } => {
                let gx = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                self.acc_vec(*x, gx);
            }
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += s * o;
                    }
                });
                self.acc(b, |gb, nodes| {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += s * o;
                    }
                });
            }
            Op::Reshape(x) => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::SliceRows { x, offset } => {
                let off = *offset;
                self.acc(*x, |gx, _| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(*p, |gp, _| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, k)| k).sum();
                let mut off = 0;
                for &(p, k) in parts {
                    self.acc(p, |gp, _| {
                        for r in 0..*rows {
                            add_into(&mut gp[r * k..(r + 1) * k], &g[r * total + off..r * total + off + k]);
                        }
                    });
                    off += k;
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::Dot { x, weights } => {
                let s = g[0];
                self.acc(*x, |gx, _| {
                    for (d, w) in gx.iter_mut().zip(weights) {
                        *d += s * w;
                    }
                });
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
                mask,
                count,
            } => {
                let s = g[0];
                let pred = *pred;
                self.acc(pred, |gp, nodes| {
                    let p = &nodes[pred.0].value;
                    for (r, m) in mask.iter().enumerate() {
                        if *m == 0.0 {
                            continue;
                        }
                        for c in 0..2 {
                            let j = 2 * r + c;
                            gp[j] += s * 2.0 * weights[c] * (p[j] - target[j]) / count;
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).with_requires_grad());
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sum_of_products_gradient_is_other_factor() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad());
        let x = t.constant(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let p = t.mul(w, x).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_requires_grad());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn activations_at_known_points() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x);
        let s = t.sigmoid(x);
        let h = t.tanh(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        assert_eq!(t.value(s)[1], 0.5);
        assert_eq!(t.value(h)[1], 0.0);
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = t.constant(&[1, 2], vec![2.0, 1.0]).unwrap();
        let b = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[3.0]);

        let x = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = t.constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let y = t.linear(x, eye, None).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let bad = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(t.linear(x, bad, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
        let one = t.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let zero = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.conv2d(x, one, Some(zero), 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let ones = t.constant(&[1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let k = t.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = t.conv2d(ones, k, Some(zero), 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert!(t.value(y).iter().all(|v| *v == 9.0));

        let k2 = t.constant(&[1, 2, 3, 3], vec![1.0; 18]).unwrap();
        let err = t.conv2d(ones, k2, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("[1, 1, 5, 5]") && err.to_string().contains("[1, 2, 3, 3]"));
    }

    #[test]
    fn pool_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_requires_grad());
        let y = t.avg_pool2d(x, 2).unwrap();
        assert_eq!(t.value(y), &[2.5]);
        let same = t.avg_pool2d(x, 1).unwrap();
        assert_eq!(t.value(same), t.value(x));
        let l = t.dot_const(y, &[8.0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 4]);

        let odd = t.constant(&[1, 1, 3, 4], vec![0.0; 12]).unwrap();
        assert!(t.avg_pool2d(odd, 2).is_err());
        let p = t.avg_pool2d_floor(odd, 2).unwrap();
        assert_eq!(t.shape(p), &[1, 1, 1, 2]);
    }

    #[test]
    fn batch_norm_modes() {
        let mut t = Tape::new();
        // per-channel mean 0, variance 1
        let x = t.constant(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let g = t.constant(&[1], vec![1.0]).unwrap();
        let b = t.constant(&[1], vec![0.0]).unwrap();
        let mut st = BatchNormState::new(1);
        let y = t.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
        let k = 1.0 / (1.0 + st.eps).sqrt();
        assert!((t.value(y)[0] + k).abs() < 1e-15 && (t.value(y)[1] - k).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);

        let mut fresh = BatchNormState::new(1);
        let y = t.batch_norm(x, g, b, &mut fresh, Mode::Eval).unwrap();
        assert!((t.value(y)[1] - k).abs() < 1e-15);
        assert_eq!(fresh, BatchNormState::new(1));

        let single = t.constant(&[1, 1], vec![3.0]).unwrap();
        assert!(matches!(
            t.batch_norm(single, g, b, &mut fresh, Mode::Train),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn dropout_behaviour() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(&[100_000], vec![1.0; 100_000]).unwrap();
        assert_eq!(t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(t.value(y).iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(t.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_masks_reproducible() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut t = Tape::new();
            let x = t.constant(&[64], vec![1.0; 64]).unwrap();
            let y = t.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
            t.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_and_slice_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap().with_requires_grad());
        let b = t.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap().with_requires_grad());
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = t.slice_rows(c, 1, 1).unwrap();
        let l = t.dot_const(r, &[1.0, 2.0, 3.0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0, 2.0, 3.0]);
    }
}
