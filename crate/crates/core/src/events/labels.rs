use super::{Event, EventStream, LabelSample, LabelTrack};
use crate::error::{Error, Result};

/// Returns `k` when `factor == 1/k` for a positive integer `k`.
pub(crate) fn decimation_step(factor: f64) -> Result<usize> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::UnsupportedFactor {
            factor,
            reason: "must lie in (0, 1]".into(),
        });
    }
    let inv = 1.0 / factor;
    let k = inv.round();
    if (inv - k).abs() > 1e-9 * k {
        return Err(Error::UnsupportedFactor {
            factor,
            reason: format!("1/factor = {inv} is not an integer"),
        });
    }
    Ok(k as usize)
}

/// Keeps every `1/factor`-th sample starting at index 0.
pub fn downsample_labels(track: &LabelTrack, factor: f64) -> Result<LabelTrack> {
    let k = decimation_step(factor)?;
    let samples: Vec<LabelSample> = track.samples().iter().step_by(k).copied().collect();
    LabelTrack::new(track.rate_hz() / k as f64, samples)
}

/// Scales the sensor plane. Event coordinates are floored onto the coarser
/// grid; label coordinates stay real-valued.
pub fn spatial_downscale(
    stream: &EventStream,
    labels: &LabelTrack,
    factor: f64,
) -> Result<(EventStream, LabelTrack)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::UnsupportedFactor {
            factor,
            reason: "must lie in (0, 1]".into(),
        });
    }
    let w = stream.width() as f64 * factor;
    let h = stream.height() as f64 * factor;
    if w < 1.0 || h < 1.0 {
        return Err(Error::Config(format!(
            "spatial factor {factor} shrinks {}x{} below one pixel",
            stream.width(),
            stream.height()
        )));
    }
    let new_w = w.ceil() as u32;
    let new_h = h.ceil() as u32;
    let events = stream
        .events()
        .iter()
        .map(|e| Event {
            x: (e.x as f64 * factor).floor() as u16,
            y: (e.y as f64 * factor).floor() as u16,
            ..*e
        })
        .collect();
    let samples = labels
        .samples()
        .iter()
        .map(|s| LabelSample {
            x: s.x * factor,
            y: s.y * factor,
            ..*s
        })
        .collect();
    Ok((
        EventStream::new(new_w, new_h, events)?,
        LabelTrack::new(labels.rate_hz(), samples)?,
    ))
}
