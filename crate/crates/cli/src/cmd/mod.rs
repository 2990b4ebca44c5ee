pub mod bin;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod synth;
pub mod train;

use evtrack_core::events::{DataConfig, SampleWindow, DEFAULT_LABEL_RATE_HZ};
use evtrack_core::models::Model;

use crate::settings::{usage, Failure, Outcome, Settings};

pub(crate) fn data_config(s: &Settings) -> Outcome<(DataConfig, f64)> {
    let cfg = DataConfig::from_kv(&s.kv)?;
    let rate: f64 = s.parsed("label_rate_hz", DEFAULT_LABEL_RATE_HZ)?;
    if !(rate > 0.0 && rate.is_finite()) {
        return usage(format!("label_rate_hz must be positive, got {rate}"));
    }
    Ok((cfg, rate))
}

/// The checkpoint was trained on frames of a fixed size.
pub(crate) fn check_frames(model: &Model, windows: &[SampleWindow]) -> Outcome<()> {
    let w = &windows[0];
    if (w.height, w.width) != (model.cfg.height, model.cfg.width) {
        return Err(Failure::Runtime(format!(
            "checkpoint expects {}x{} frames but the data bins to {}x{}; use the spatial factor it was trained with",
            model.cfg.width, model.cfg.height, w.width, w.height
        )));
    }
    Ok(())
}
