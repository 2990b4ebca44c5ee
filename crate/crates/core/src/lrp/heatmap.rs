//! Heatmap files for one frame of a relevance map.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::RelevanceMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    /// 8-bit binary greymap of the channel sum, 128 = no relevance.
    Pgm,
    /// Raw signed values, one line per image row, channel after channel.
    Csv,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Pgm => "pgm",
            HeatmapFormat::Csv => "csv",
        }
    }
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            _ => Err(Error::Config(format!("unknown heatmap format '{s}' (expected pgm or csv)"))),
        }
    }
}

fn checked_frame(map: &RelevanceMap, frame: usize) -> Result<&[f64]> {
    if frame >= map.len {
        return Err(Error::Contract(format!(
            "frame index {frame} out of range for a map of {} frames",
            map.len
        )));
    }
    Ok(map.frame(frame))
}

/// P5 bytes: the channel sum mapped symmetrically around 128, so the largest
/// |relevance| lands on 0 or 255.
pub fn heatmap_pgm(map: &RelevanceMap, frame: usize) -> Result<Vec<u8>> {
    let data = checked_frame(map, frame)?;
    let plane = map.height * map.width;
    let summed: Vec<f64> = (0..plane)
        .map(|p| (0..map.channels).map(|c| data[c * plane + p]).sum())
        .collect();
    let m = summed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(summed.iter().map(|&v| {
        if m == 0.0 {
            128
        } else if v >= 0.0 {
            (128.0 + 127.0 * v / m).round() as u8
        } else {
            (128.0 - 128.0 * v.abs() / m).round() as u8
        }
    }));
    Ok(out)
}

/// Comma-separated rows with 17 significant digits, which round-trip f64.
pub fn heatmap_csv(map: &RelevanceMap, frame: usize) -> Result<String> {
    let data = checked_frame(map, frame)?;
    let mut out = String::new();
    for row in data.chunks_exact(map.width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_heatmap(map: &RelevanceMap, frame: usize, path: &Path, format: HeatmapFormat) -> Result<()> {
    let bytes = match format {
        HeatmapFormat::Pgm => heatmap_pgm(map, frame)?,
        HeatmapFormat::Csv => heatmap_csv(map, frame)?.into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
