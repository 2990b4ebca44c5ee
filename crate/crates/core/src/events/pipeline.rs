use super::{
    bin_to_frames_span, downsample_labels, normalize_frames, spatial_downscale, EventStream, FrameNorm, FrameSequence,
    LabelTrack, SampleWindow, WindowSpec, DEFAULT_FRAME_DURATION_US, DEFAULT_SPATIAL_FACTOR, DEFAULT_TEMPORAL_FACTOR,
};
use crate::config::KvMap;
use crate::error::{Error, Result};

/// Everything between raw files and training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub spatial_factor: f64,
    pub temporal_factor: f64,
    pub frame_duration_us: u64,
    pub seq_len: usize,
    pub stride: usize,
    pub frame_norm: FrameNorm,
    pub drop_closed: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let w = WindowSpec::default();
        DataConfig {
            spatial_factor: DEFAULT_SPATIAL_FACTOR,
            temporal_factor: DEFAULT_TEMPORAL_FACTOR,
            frame_duration_us: DEFAULT_FRAME_DURATION_US,
            seq_len: w.seq_len,
            stride: w.stride,
            frame_norm: FrameNorm::default(),
            drop_closed: w.drop_closed,
        }
    }
}

pub const DATA_KEYS: [&str; 7] = [
    "spatial_factor",
    "temporal_factor",
    "frame_duration_us",
    "seq_len",
    "stride",
    "frame_norm",
    "drop_closed",
];

impl DataConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("spatial_factor", self.spatial_factor);
        m.set("temporal_factor", self.temporal_factor);
        m.set("frame_duration_us", self.frame_duration_us);
        m.set("seq_len", self.seq_len);
        m.set("stride", self.stride);
        m.set("frame_norm", self.frame_norm.name());
        m.set("drop_closed", self.drop_closed);
        m
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = DataConfig::default();
        if let Some(v) = kv.parsed("spatial_factor")? {
            c.spatial_factor = v;
        }
        if let Some(v) = kv.parsed("temporal_factor")? {
            c.temporal_factor = v;
        }
        if let Some(v) = kv.parsed("frame_duration_us")? {
            c.frame_duration_us = v;
        }
        if let Some(v) = kv.parsed("seq_len")? {
            c.seq_len = v;
        }
        if let Some(v) = kv.parsed("stride")? {
            c.stride = v;
        }
        if let Some(v) = kv.get("frame_norm") {
            c.frame_norm = v.parse()?;
        }
        if let Some(v) = kv.parsed("drop_closed")? {
            c.drop_closed = v;
        }
        Ok(c)
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            seq_len: self.seq_len,
            stride: self.stride,
            drop_closed: self.drop_closed,
        }
    }
}

/// Downscales, decimates labels, bins and normalizes. The frame span covers
/// both the events and the label track.
pub fn prepare_frames(stream: &EventStream, labels: &LabelTrack, cfg: &DataConfig) -> Result<(FrameSequence, LabelTrack)> {
    if cfg.frame_duration_us == 0 {
        return Err(Error::Config("frame_duration_us must be positive".into()));
    }
    let (stream, labels) = spatial_downscale(stream, labels, cfg.spatial_factor)?;
    let labels = downsample_labels(&labels, cfg.temporal_factor)?;
    let last_event = stream.events().last().map_or(0, |e| e.t + 1);
    let last_label = labels.samples().last().map_or(0, |s| s.t + 1);
    let n_frames = last_event.max(last_label).div_ceil(cfg.frame_duration_us) as usize;
    let frames = bin_to_frames_span(&stream, cfg.frame_duration_us, 0, n_frames)?;
    Ok((normalize_frames(&frames, cfg.frame_norm), labels))
}

pub fn prepare_windows(stream: &EventStream, labels: &LabelTrack, cfg: &DataConfig) -> Result<Vec<SampleWindow>> {
    let (frames, labels) = prepare_frames(stream, labels, cfg)?;
    cfg.window_spec().apply(&frames, &labels)
}
