//! Reverse-mode automatic differentiation over f64 tensors.

pub mod check;
pub mod kernels;
pub mod params;
pub mod recurrent;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, grad_check_params, grad_check_params_with, relative_error, ParamCheck, Stencil};
pub use params::{glorot_uniform, ParameterStore};
pub use recurrent::{gru_cell, lstm_cell, run_recurrent, CellKind, CellWeights, RecurrentSpec, RecurrentState};
pub use tape::{Activation, BatchNormState, Mode, Tape, Var};
pub use tensor::Tensor;
