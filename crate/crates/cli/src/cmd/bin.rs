use std::path::Path;

use evtrack_core::events::{prepare_frames, save_labels, FrameSequence, FRAME_CHANNELS};
use serde_json::json;

use super::data_config;
use crate::dataset::{discover, LABELS_FILE};
use crate::settings::{create_dir, num, write_file, write_json, write_manifest, Outcome, Settings};

pub const FRAMES_FILE: &str = "frames.evf";
pub const FRAMES_MAGIC: &[u8; 4] = b"EVF1";

/// `EVF1`, then u32 len, channels, height, width, u64 frame duration and
/// origin (µs), then `[L, C, H, W]` f64 values, all little-endian.
pub fn encode_frames(frames: &FrameSequence) -> Vec<u8> {
    let mut b = Vec::with_capacity(40 + frames.data().len() * 8);
    b.extend_from_slice(FRAMES_MAGIC);
    for v in [
        frames.len(),
        FRAME_CHANNELS,
        frames.height(),
        frames.width(),
    ] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&frames.frame_duration().to_le_bytes());
    b.extend_from_slice(&frames.origin_t().to_le_bytes());
    for v in frames.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn write_session(
    dir: &Path,
    frames: &FrameSequence,
    labels: &evtrack_core::events::LabelTrack,
) -> Outcome<()> {
    create_dir(dir)?;
    write_file(&dir.join(FRAMES_FILE), &encode_frames(frames))?;
    save_labels(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn run(s: &Settings) -> Outcome<()> {
    let data = s.require_path("data")?;
    let out = s.require_path("out")?;
    let (cfg, rate) = data_config(s)?;
    let sessions = discover(&data)?;
    let single = sessions.len() == 1 && sessions[0].dir == data;
    create_dir(&out)?;

    let mut rows = Vec::new();
    for sess in &sessions {
        let (events, labels) = sess.load(rate)?;
        let (frames, small) = prepare_frames(&events, &labels, &cfg)?;
        let dir = if single {
            out.clone()
        } else {
            out.join(&sess.name)
        };
        write_session(&dir, &frames, &small)?;
        let active = frames.data().iter().filter(|v| **v != 0.0).count();
        say!(
            "{}: {} frames of {}x{}, {} labels at {} Hz",
            sess.name,
            frames.len(),
            frames.width(),
            frames.height(),
            small.len(),
            small.rate_hz()
        );
        rows.push(json!({
            "name": sess.name,
            "frames": frames.len(),
            "width": frames.width(),
            "height": frames.height(),
            "events": events.len(),
            "labels": small.len(),
            "label_rate_hz": num(small.rate_hz()),
            "active_bins": active,
        }));
    }
    let mut resolved = cfg.to_kv();
    resolved.set("label_rate_hz", rate);
    write_manifest(&out, s, &resolved)?;
    write_json(&out.join("summary.json"), &json!({ "sessions": rows }))
}
