//! LSTM and GRU cells built from taped primitives, plus multi-layer and
//! bidirectional unrolling. Gradients through time come from the tape.

use rand::Rng;

use super::params::{glorot_uniform, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    /// Gate names in parameter order.
    pub fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["i", "f", "g", "o"],
            CellKind::Gru => &["z", "r", "n"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentSpec {
    pub cell: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl RecurrentSpec {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.hidden * self.directions()
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input
        } else {
            self.output_dim()
        }
    }

    /// Prefix of one (layer, direction) cell, e.g. `rnn.l1.fwd`.
    pub fn cell_prefix(prefix: &str, layer: usize, dir: usize) -> String {
        format!("{prefix}.l{layer}.{}", DIRECTIONS[dir])
    }

    /// Glorot for input and hidden weights, forget-gate bias 1, other biases 0.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, prefix: &str, rng: &mut R) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.input == 0 {
            return Err(Error::Config("recurrent stage needs layers, input and hidden ≥ 1".into()));
        }
        let h = self.hidden;
        for layer in 0..self.layers {
            let n_in = self.layer_input(layer);
            for dir in 0..self.directions() {
                let p = Self::cell_prefix(prefix, layer, dir);
                for gate in self.cell.gates() {
                    store.insert(format!("{p}.w_{gate}"), glorot_uniform(rng, &[h, n_in], n_in, h))?;
                    store.insert(format!("{p}.u_{gate}"), glorot_uniform(rng, &[h, h], h, h))?;
                    let bias = if self.cell == CellKind::Lstm && *gate == "f" { 1.0 } else { 0.0 };
                    store.insert(format!("{p}.b_{gate}"), Tensor::filled(&[h], bias))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    /// Cell state, present for LSTM only.
    pub c: Option<Var>,
}

impl RecurrentState {
    pub fn zeros(tape: &mut Tape, cell: CellKind, batch: usize, hidden: usize) -> Result<Self> {
        let h = tape.constant(&[batch, hidden], vec![0.0; batch * hidden])?;
        let c = match cell {
            CellKind::Lstm => Some(tape.constant(&[batch, hidden], vec![0.0; batch * hidden])?),
            CellKind::Gru => None,
        };
        Ok(RecurrentState { h, c })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct CellWeights {
    pub kind: CellKind,
    /// One entry per gate in [`CellKind::gates`] order.
    pub gates: Vec<GateWeights>,
}

impl CellWeights {
    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str, kind: CellKind) -> Result<Self> {
        let gates = kind
            .gates()
            .iter()
            .map(|g| {
                Ok(GateWeights {
                    w: tape.param(store, &format!("{prefix}.w_{g}"))?,
                    u: tape.param(store, &format!("{prefix}.u_{g}"))?,
                    b: tape.param(store, &format!("{prefix}.b_{g}"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CellWeights { kind, gates })
    }
}

fn gate_pre(tape: &mut Tape, x: Var, h: Var, g: &GateWeights) -> Result<Var> {
    let wx = tape.linear(x, g.w, Some(g.b))?;
    let uh = tape.linear(h, g.u, None)?;
    tape.add(wx, uh)
}

/// One LSTM step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell(tape: &mut Tape, x: Var, state: &RecurrentState, w: &CellWeights) -> Result<RecurrentState> {
    if w.kind != CellKind::Lstm {
        return Err(Error::Contract("lstm_cell given GRU weights".into()));
    }
    let c = state
        .c
        .ok_or_else(|| Error::Contract("LSTM state has no cell vector".into()))?;
    let pre_i = gate_pre(tape, x, state.h, &w.gates[0])?;
    let pre_f = gate_pre(tape, x, state.h, &w.gates[1])?;
    let pre_g = gate_pre(tape, x, state.h, &w.gates[2])?;
    let pre_o = gate_pre(tape, x, state.h, &w.gates[3])?;
    let i = tape.sigmoid(pre_i);
    let f = tape.sigmoid(pre_f);
    let g = tape.tanh(pre_g);
    let o = tape.sigmoid(pre_o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok(RecurrentState {
        h: h_next,
        c: Some(c_next),
    })
}

/// One GRU step: `n = tanh(W_n x + r⊙(U_n h) + b_n)`, `h' = (1-z)⊙n + z⊙h`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, w: &CellWeights) -> Result<Var> {
    if w.kind != CellKind::Gru {
        return Err(Error::Contract("gru_cell given LSTM weights".into()));
    }
    let pre_z = gate_pre(tape, x, h, &w.gates[0])?;
    let pre_r = gate_pre(tape, x, h, &w.gates[1])?;
    let z = tape.sigmoid(pre_z);
    let r = tape.sigmoid(pre_r);
    let gn = &w.gates[2];
    let wx = tape.linear(x, gn.w, Some(gn.b))?;
    let uh = tape.linear(h, gn.u, None)?;
    let ruh = tape.mul(r, uh)?;
    let pre_n = tape.add(wx, ruh)?;
    let n = tape.tanh(pre_n);
    // (1-z)⊙n + z⊙h == n + z⊙(h - n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

fn step(tape: &mut Tape, x: Var, state: &RecurrentState, w: &CellWeights) -> Result<RecurrentState> {
    match w.kind {
        CellKind::Lstm => lstm_cell(tape, x, state, w),
        CellKind::Gru => Ok(RecurrentState {
            h: gru_cell(tape, x, state.h, w)?,
            c: None,
        }),
    }
}

/// Unrolls the stack over `seq` (one `[B, n]` input per step) from zero
/// states. Each step's output is `[B, hidden]`, or `[B, 2·hidden]` with the
/// forward and time-reversed halves concatenated when bidirectional.
pub fn run_recurrent(
    tape: &mut Tape,
    seq: &[Var],
    spec: &RecurrentSpec,
    store: &ParameterStore,
    prefix: &str,
) -> Result<Vec<Var>> {
    if spec.layers == 0 {
        return Err(Error::Config("recurrent stage needs at least one layer".into()));
    }
    let Some(first) = seq.first() else {
        return Ok(Vec::new());
    };
    let batch = match *tape.shape(*first) {
        [b, n] if n == spec.input => b,
        ref s => {
            return Err(Error::shape(
                "run_recurrent",
                format!("step input {s:?}, expected [B, {}]", spec.input),
            ))
        }
    };
    let mut inputs = seq.to_vec();
    for layer in 0..spec.layers {
        let mut per_dir = Vec::with_capacity(spec.directions());
        for dir in 0..spec.directions() {
            let w = CellWeights::load(tape, store, &RecurrentSpec::cell_prefix(prefix, layer, dir), spec.cell)?;
            let mut state = RecurrentState::zeros(tape, spec.cell, batch, spec.hidden)?;
            let mut outs = vec![state.h; inputs.len()];
            let order: Box<dyn Iterator<Item = usize>> = if dir == 0 {
                Box::new(0..inputs.len())
            } else {
                Box::new((0..inputs.len()).rev())
            };
            for t in order {
                state = step(tape, inputs[t], &state, &w)?;
                outs[t] = state.h;
            }
            per_dir.push(outs);
        }
        inputs = if spec.bidirectional {
            (0..inputs.len())
                .map(|t| tape.concat_cols(&[per_dir[0][t], per_dir[1][t]]))
                .collect::<Result<_>>()?
        } else {
            per_dir.pop().unwrap()
        };
    }
    Ok(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_store(spec: &RecurrentSpec) -> ParameterStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new(0);
        spec.init_params(&mut s, "rnn", &mut rng).unwrap();
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn lstm_zero_params_closed_form() {
        let spec = RecurrentSpec {
            cell: CellKind::Lstm,
            input: 3,
            hidden: 2,
            layers: 1,
            bidirectional: false,
        };
        let store = zero_store(&spec);
        let mut t = Tape::new();
        let w = CellWeights::load(&mut t, &store, "rnn.l0.fwd", CellKind::Lstm).unwrap();
        let x = t.constant(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let zero = RecurrentState::zeros(&mut t, CellKind::Lstm, 1, 2).unwrap();
        let s = lstm_cell(&mut t, x, &zero, &w).unwrap();
        assert_eq!(t.value(s.h), &[0.0, 0.0]);
        assert_eq!(t.value(s.c.unwrap()), &[0.0, 0.0]);

        let c = t.constant(&[1, 2], vec![2.0, 2.0]).unwrap();
        let st = RecurrentState { h: zero.h, c: Some(c) };
        let s = lstm_cell(&mut t, x, &st, &w).unwrap();
        assert_eq!(t.value(s.c.unwrap()), &[1.0, 1.0]);
        assert_eq!(t.value(s.h), &[0.5 * 1f64.tanh(), 0.5 * 1f64.tanh()]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let spec = RecurrentSpec {
            cell: CellKind::Lstm,
            input: 2,
            hidden: 3,
            layers: 1,
            bidirectional: false,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new(0);
        spec.init_params(&mut s, "rnn", &mut rng).unwrap();
        assert_eq!(s.get("rnn.l0.fwd.b_f").unwrap().data(), &[1.0; 3]);
        assert_eq!(s.get("rnn.l0.fwd.b_i").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn gru_zero_params_closed_form() {
        let spec = RecurrentSpec {
            cell: CellKind::Gru,
            input: 2,
            hidden: 3,
            layers: 1,
            bidirectional: false,
        };
        let store = zero_store(&spec);
        let mut t = Tape::new();
        let w = CellWeights::load(&mut t, &store, "rnn.l0.fwd", CellKind::Gru).unwrap();
        let x = t.constant(&[1, 2], vec![1.0, -1.0]).unwrap();
        let h0 = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let h = gru_cell(&mut t, x, h0, &w).unwrap();
        assert_eq!(t.value(h), &[0.0; 3]);
        let v = t.constant(&[1, 3], vec![1.0, -4.0, 0.5]).unwrap();
        let h = gru_cell(&mut t, x, v, &w).unwrap();
        assert_eq!(t.value(h), &[0.5, -2.0, 0.25]);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let spec = RecurrentSpec {
            cell: CellKind::Gru,
            input: 2,
            hidden: 3,
            layers: 1,
            bidirectional: false,
        };
        let store = zero_store(&spec);
        let mut t = Tape::new();
        let x = t.constant(&[1, 5], vec![0.0; 5]).unwrap();
        assert!(matches!(
            run_recurrent(&mut t, &[x], &spec, &store, "rnn"),
            Err(Error::Shape { .. })
        ));
    }
}
