//! Finite-difference verification suite over every taped primitive and the
//! three model variants. Shared by the tests and the `grad-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{grad_check_params_with, Stencil, DEFAULT_STEP, EXTRAPOLATION_STEP};
use crate::autodiff::{
    gru_cell, lstm_cell, run_recurrent, Activation, BatchNormState, CellKind, CellWeights, Mode, ParameterStore,
    RecurrentSpec, RecurrentState, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::models::{build_model, ModelConfig, Variant};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub points: usize,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because a ReLU kink lies inside the stencil.
    pub skipped: usize,
}

/// Step used by the suites. The plain central difference at
/// [`DEFAULT_STEP`] carries about 1e-11 of roundoff, which exceeds the
/// tolerances for gradients near the 1e-8 floor of the error metric.
pub const SUITE_STENCIL: Stencil = Stencil::Extrapolated(EXTRAPOLATION_STEP);

/// The literal `(f(x+h) - f(x-h)) / 2h` oracle at h = 1e-5.
pub const PLAIN_STENCIL: Stencil = Stencil::Central(DEFAULT_STEP);

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Build<'a> = dyn Fn(&mut Tape, &ParameterStore) -> Result<Var> + 'a;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Checks `f` (any output shape, reduced through a random projection) at
/// `points` random parameter draws.
fn check(name: &str, tol: f64, points: usize, seed: u64, stencil: Stencil, shapes: &[(&str, &[usize])], f: &Build<'_>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome {
        name: name.to_string(),
        max_rel_error: 0.0,
        tolerance: tol,
        points,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for _ in 0..points {
        let mut store = ParameterStore::new(seed);
        for (n, s) in shapes {
            store.insert(*n, uniform(&mut rng, s, -1.0, 1.0))?;
        }
        check_store(&mut out, &store, f, &mut rng, stencil)?;
    }
    Ok(out)
}

fn check_store(out: &mut CheckOutcome, store: &ParameterStore, f: &Build<'_>, rng: &mut ChaCha8Rng, stencil: Stencil) -> Result<()> {
    let mut probe = Tape::new();
    let y = f(&mut probe, store)?;
    let n = probe.value(y).len();
    let proj: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check_params_with(
        store,
        |t, s| {
            let y = f(t, s)?;
            t.dot_const(y, &proj)
        },
        stencil,
    )?;
    out.checked += r.checked;
    out.skipped += r.skipped;
    if r.max_rel_error >= out.max_rel_error {
        out.max_rel_error = r.max_rel_error;
        out.worst = r.worst;
    }
    Ok(())
}

fn p(t: &mut Tape, s: &ParameterStore, n: &str) -> Result<Var> {
    t.param(s, n)
}

/// Every primitive at `points` seeded random points.
pub fn primitive_suite(points: usize, seed: u64, stencil: Stencil) -> Result<Vec<CheckOutcome>> {
    let tol = PRIMITIVE_TOLERANCE;
    let mut v = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
        s
    };

    v.push(check("conv2d", tol, points, next(), stencil, &[("x", &[2, 3, 8, 8]), ("w", &[4, 3, 3, 3]), ("b", &[4])], &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.conv2d(x, w, Some(b), 1, 0)
    })?);
    v.push(check("conv2d_stride2_pad1", tol, points, next(), stencil, &[("x", &[2, 2, 7, 7]), ("w", &[3, 2, 3, 3])], &|t, s| {
        let (x, w) = (p(t, s, "x")?, p(t, s, "w")?);
        t.conv2d(x, w, None, 2, 1)
    })?);
    v.push(check("avg_pool2d", tol, points, next(), stencil, &[("x", &[2, 3, 4, 6])], &|t, s| {
        let x = p(t, s, "x")?;
        t.avg_pool2d(x, 2)
    })?);
    v.push(check("avg_pool2d_floor", tol, points, next(), stencil, &[("x", &[2, 2, 5, 7])], &|t, s| {
        let x = p(t, s, "x")?;
        t.avg_pool2d_floor(x, 2)
    })?);
    v.push(check("linear", tol, points, next(), stencil, &[("x", &[3, 5]), ("w", &[4, 5]), ("b", &[4])], &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.linear(x, w, Some(b))
    })?);
    for (name, kind) in [("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid), ("tanh", Activation::Tanh)] {
        v.push(check(name, tol, points, next(), stencil, &[("x", &[4, 6])], &move |t, s| {
            let x = p(t, s, "x")?;
            Ok(t.activation(x, kind))
        })?);
    }
    v.push(check(
        "batch_norm_train",
        MODEL_TOLERANCE,
        points,
        next(),
        stencil,
        &[("x", &[4, 3, 2, 2]), ("g", &[3]), ("b", &[3])],
        &|t, s| {
            let (x, g, b) = (p(t, s, "x")?, p(t, s, "g")?, p(t, s, "b")?);
            let mut st = BatchNormState::new(3);
            t.batch_norm(x, g, b, &mut st, Mode::Train)
        },
    )?);
    v.push(check("batch_norm_eval", tol, points, next(), stencil, &[("x", &[2, 3, 2]), ("g", &[3]), ("b", &[3])], &|t, s| {
        let (x, g, b) = (p(t, s, "x")?, p(t, s, "g")?, p(t, s, "b")?);
        let mut st = BatchNormState::new(3);
        st.running_mean = vec![0.1, -0.2, 0.3];
        st.running_var = vec![0.5, 1.5, 2.0];
        t.batch_norm(x, g, b, &mut st, Mode::Eval)
    })?);
    v.push(check("dropout_train", tol, points, next(), stencil, &[("x", &[5, 6])], &|t, s| {
        let x = p(t, s, "x")?;
        t.dropout(x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7))
    })?);
    v.push(check("add_sub_mul", tol, points, next(), stencil, &[("a", &[3, 4]), ("b", &[3, 4])], &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        let u = t.add(a, b)?;
        let w = t.sub(a, b)?;
        t.mul(u, w)
    })?);
    v.push(check("reshape_slice_concat", tol, points, next(), stencil, &[("a", &[4, 3]), ("b", &[2, 6])], &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        let a2 = t.reshape(a, &[2, 6])?;
        let top = t.slice_rows(a2, 1, 1)?;
        let rows = t.concat_rows(&[b, top])?;
        let cols = t.concat_cols(&[rows, rows])?;
        let sq = t.mul(cols, cols)?;
        let total = t.sum(sq);
        t.concat_rows(&[total, total])
    })?);
    v.push(check("weighted_mse", tol, points, next(), stencil, &[("x", &[5, 2])], &|t, s| {
        let x = p(t, s, "x")?;
        let target = [0.1, 0.2, 0.9, 0.5, -0.3, 0.4, 0.0, 1.0, 0.7, 0.2];
        let mask = [true, false, true, true, true];
        t.weighted_mse(x, &target, [2.0, 0.5], Some(&mask))
    })?);

    let (h, n) = (3usize, 4usize);
    let lstm_shapes = cell_shapes(CellKind::Lstm, n, h);
    let lstm_refs: Vec<(&str, &[usize])> = lstm_shapes.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
    v.push(check("lstm_cell_3_steps", tol, points, next(), stencil, &lstm_refs, &move |t, s| {
        let w = CellWeights::load(t, s, "c", CellKind::Lstm)?;
        let mut st = RecurrentState::zeros(t, CellKind::Lstm, 2, h)?;
        let mut outs = Vec::new();
        for i in 0..3 {
            let x = p(t, s, &format!("x{i}"))?;
            st = lstm_cell(t, x, &st, &w)?;
            outs.push(st.h);
        }
        outs.push(st.c.expect("lstm state"));
        t.concat_rows(&outs)
    })?);
    let gru_shapes = cell_shapes(CellKind::Gru, n, h);
    let gru_refs: Vec<(&str, &[usize])> = gru_shapes.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
    v.push(check("gru_cell_3_steps", tol, points, next(), stencil, &gru_refs, &move |t, s| {
        let w = CellWeights::load(t, s, "c", CellKind::Gru)?;
        let mut hv = t.constant(&[2, h], vec![0.0; 2 * h])?;
        let mut outs = Vec::new();
        for i in 0..3 {
            let x = p(t, s, &format!("x{i}"))?;
            hv = gru_cell(t, x, hv, &w)?;
            outs.push(hv);
        }
        t.concat_rows(&outs)
    })?);
    for (name, cell, layers, bidi) in [
        ("run_recurrent_lstm_2_layers", CellKind::Lstm, 2, false),
        ("run_recurrent_bilstm", CellKind::Lstm, 1, true),
        ("run_recurrent_gru", CellKind::Gru, 1, false),
    ] {
        let spec = RecurrentSpec {
            cell,
            input: n,
            hidden: h,
            layers,
            bidirectional: bidi,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(next());
        let mut out = CheckOutcome {
            name: name.to_string(),
            max_rel_error: 0.0,
            tolerance: tol,
            points,
            worst: String::new(),
            checked: 0,
            skipped: 0,
        };
        for _ in 0..points {
            let mut store = ParameterStore::new(0);
            spec.init_params(&mut store, "rnn", &mut rng)?;
            for (_, t) in store.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
            for i in 0..3 {
                store.insert(format!("x{i}"), uniform(&mut rng, &[2, n], -1.0, 1.0))?;
            }
            check_store(
                &mut out,
                &store,
                &move |t, s| {
                    let seq = (0..3).map(|i| p(t, s, &format!("x{i}"))).collect::<Result<Vec<_>>>()?;
                    let ys = run_recurrent(t, &seq, &spec, s, "rnn")?;
                    t.concat_rows(&ys)
                },
                &mut rng,
                stencil,
            )?;
        }
        v.push(out);
    }
    Ok(v)
}

fn cell_shapes(kind: CellKind, n: usize, h: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for g in kind.gates() {
        v.push((format!("c.w_{g}"), vec![h, n]));
        v.push((format!("c.u_{g}"), vec![h, h]));
        v.push((format!("c.b_{g}"), vec![h]));
    }
    for i in 0..3 {
        v.push((format!("x{i}"), vec![2, n]));
    }
    v
}

/// Small configuration (well under 5k parameters) used for full-model checks.
pub fn reduced_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(variant);
    c.height = 8;
    c.width = 8;
    c.conv_channels = vec![3, 4];
    c.feature_dim = 6;
    c.hidden = 5;
    c
}

/// Full train-mode forward of each variant over 3 steps, batch 2; checks
/// every parameter.
pub fn model_suite(points: usize, seed: u64, stencil: Stencil) -> Result<Vec<CheckOutcome>> {
    let mut v = Vec::new();
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut out = CheckOutcome {
            name: format!("model_{variant}"),
            max_rel_error: 0.0,
            tolerance: MODEL_TOLERANCE,
            points,
            worst: String::new(),
            checked: 0,
            skipped: 0,
        };
        for i in 0..points {
            let mut cfg = reduced_config(variant);
            cfg.seed = seed.wrapping_add(100 * k as u64 + i as u64);
            let (model, store) = build_model(&cfg)?;
            let (len, batch) = (3usize, 2usize);
            let frames: Vec<f64> = (0..len * batch * model.frame_size()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let dropout_seed = rng.gen::<u64>();
            check_store(
                &mut out,
                &store,
                &|t, s| {
                    let mut m = model.clone();
                    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
                    Ok(m.forward(t, s, &frames, len, batch, Mode::Train, &mut r)?.coords)
                },
                &mut rng,
                stencil,
            )?;
        }
        v.push(out);
    }
    Ok(v)
}
