//! Event-camera pupil tracking: event streams, a small autodiff engine,
//! CNN + recurrent models, training, metrics, relevance propagation and a
//! synthetic event simulator.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod events;
pub mod gradcheck;
pub mod lrp;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
