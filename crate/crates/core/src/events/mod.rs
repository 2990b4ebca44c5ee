//! Event streams, label tracks and their conversion into model-ready frame
//! sequences and training windows.
//!
//! The pipeline is: load (or synthesize) an [`EventStream`] and a 100 Hz
//! [`LabelTrack`], optionally [`spatial_downscale`] both, [`downsample_labels`]
//! to the frame rate, [`bin_to_frames`] into two polarity-count channels,
//! [`normalize_frames`], and cut [`make_windows`].

mod frames;
mod io;
mod labels;
mod pipeline;
mod windows;

pub use frames::{bin_to_frames, bin_to_frames_span, normalize_frames, FrameNorm};
pub use io::{
    load_events, load_labels, read_events, read_labels, save_events, save_labels, write_events,
    write_labels,
};
pub use labels::{downsample_labels, spatial_downscale};
pub use pipeline::{prepare_frames, prepare_windows, DataConfig, DATA_KEYS};
pub use windows::{make_windows, WindowSpec};

use crate::error::{Error, Result};

pub const DEFAULT_SENSOR_WIDTH: u32 = 640;
pub const DEFAULT_SENSOR_HEIGHT: u32 = 480;
/// 20 Hz evaluation clock.
pub const DEFAULT_FRAME_DURATION_US: u64 = 50_000;
pub const DEFAULT_LABEL_RATE_HZ: f64 = 100.0;
pub const DEFAULT_SPATIAL_FACTOR: f64 = 0.125;
pub const DEFAULT_TEMPORAL_FACTOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// Frame channel that counts events of this polarity.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds since stream start.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Event { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and ordering. Events must already be sorted by time.
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 || width > u16::MAX as u32 + 1 || height > u16::MAX as u32 + 1
        {
            return Err(Error::Format(format!(
                "sensor dimensions {width}x{height} out of range"
            )));
        }
        let mut prev_t = 0;
        for (index, e) in events.iter().enumerate() {
            if e.x as u32 >= width || e.y as u32 >= height {
                return Err(Error::Validation {
                    index,
                    reason: format!(
                        "coordinate ({}, {}) outside {width}x{height} sensor",
                        e.x, e.y
                    ),
                });
            }
            if e.t < prev_t {
                return Err(Error::Validation {
                    index,
                    reason: format!("timestamp {} precedes previous timestamp {prev_t}", e.t),
                });
            }
            prev_t = e.t;
        }
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    /// Sorts by timestamp (stable, so ties keep their input order) before validating.
    pub fn from_unsorted(width: u32, height: u32, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(width, height, events)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSample {
    pub t: u64,
    /// Pupil centre in sensor pixels.
    pub x: f64,
    pub y: f64,
    /// Eye closed (blink) at this sample.
    pub close: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTrack {
    rate_hz: f64,
    samples: Vec<LabelSample>,
}

impl LabelTrack {
    /// Checks that samples are spaced at `1/rate_hz` (±1 µs of rounding) and
    /// that coordinates are finite and non-negative.
    pub fn new(rate_hz: f64, samples: Vec<LabelSample>) -> Result<Self> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::Config(format!("label rate must be positive, got {rate_hz}")));
        }
        let period = 1e6 / rate_hz;
        if let Some(first) = samples.first() {
            let t0 = first.t as f64;
            for (index, s) in samples.iter().enumerate() {
                let expected = t0 + index as f64 * period;
                if (s.t as f64 - expected).abs() > 1.0 + 1e-9 * expected.abs() {
                    return Err(Error::Validation {
                        index,
                        reason: format!(
                            "timestamp {} µs breaks the {period} µs spacing of a {rate_hz} Hz track",
                            s.t
                        ),
                    });
                }
                if !(s.x.is_finite() && s.y.is_finite() && s.x >= 0.0 && s.y >= 0.0) {
                    return Err(Error::Validation {
                        index,
                        reason: format!("invalid pupil coordinate ({}, {})", s.x, s.y),
                    });
                }
            }
        }
        Ok(LabelTrack { rate_hz, samples })
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn period_us(&self) -> f64 {
        1e6 / self.rate_hz
    }

    pub fn samples(&self) -> &[LabelSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks the coordinate upper bounds against a sensor size.
    pub fn check_bounds(&self, width: f64, height: f64) -> Result<()> {
        for (index, s) in self.samples.iter().enumerate() {
            if s.x > width || s.y > height {
                return Err(Error::Validation {
                    index,
                    reason: format!(
                        "pupil coordinate ({}, {}) outside {width}x{height}",
                        s.x, s.y
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Polarity-count frames, laid out `[T, 2, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Vec<f64>,
    len: usize,
    height: usize,
    width: usize,
    frame_duration: u64,
    origin_t: u64,
}

pub const FRAME_CHANNELS: usize = 2;

impl FrameSequence {
    pub fn new(
        data: Vec<f64>,
        len: usize,
        height: usize,
        width: usize,
        frame_duration: u64,
        origin_t: u64,
    ) -> Result<Self> {
        if data.len() != len * FRAME_CHANNELS * height * width {
            return Err(Error::shape(
                "FrameSequence::new",
                format!(
                    "{} values for [{len}, 2, {height}, {width}]",
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("frame values must be non-negative".into()));
        }
        Ok(FrameSequence {
            data,
            len,
            height,
            width,
            frame_duration,
            origin_t,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_duration(&self) -> u64 {
        self.frame_duration
    }

    pub fn origin_t(&self) -> u64 {
        self.origin_t
    }

    pub fn frame_size(&self) -> usize {
        FRAME_CHANNELS * self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_size();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, frame: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.data[((frame * FRAME_CHANNELS + channel) * self.height + y) * self.width + x]
    }

    /// End of frame `i`'s accumulation interval.
    pub fn frame_end_t(&self, i: usize) -> u64 {
        self.origin_t + (i as u64 + 1) * self.frame_duration
    }
}

/// `L` consecutive frames with one normalized pupil target per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[L, 2, H, W]` row-major.
    pub frames: Vec<f64>,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// Pupil centre as `(x / W, y / H)`.
    pub targets: Vec<[f64; 2]>,
    /// `true` where the label marks a closed eye.
    pub close_mask: Vec<bool>,
    pub frame_duration: u64,
    /// Index of the first frame in the source sequence.
    pub start_frame: usize,
}

impl SampleWindow {
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = FRAME_CHANNELS * self.height * self.width;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_size(&self) -> usize {
        FRAME_CHANNELS * self.height * self.width
    }
}
