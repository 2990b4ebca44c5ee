//! Pixel accuracy at tolerance, Euclidean distance, and the evaluation harness.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::events::{SampleWindow, DEFAULT_FRAME_DURATION_US, DEFAULT_SPATIAL_FACTOR};
use crate::models::{batch_frames, Model};

pub const DEFAULT_TOLERANCES: [f64; 3] = [5.0, 10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelSpace {
    #[default]
    Downsampled,
    Sensor,
}

impl PixelSpace {
    pub fn name(self) -> &'static str {
        match self {
            PixelSpace::Downsampled => "downsampled",
            PixelSpace::Sensor => "sensor",
        }
    }
}

impl fmt::Display for PixelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PixelSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsampled" => Ok(PixelSpace::Downsampled),
            "sensor" => Ok(PixelSpace::Sensor),
            _ => Err(Error::Config(format!("unknown pixel space '{s}' (expected downsampled or sensor)"))),
        }
    }
}

fn check_pairs(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", format!("{} predictions vs {} ground-truth points", pred.len(), gt.len())));
    }
    Ok(())
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn validate_tolerances(tolerances: &[f64]) -> Result<()> {
    if tolerances.is_empty() || tolerances.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Config(format!("tolerances {tolerances:?} must be a non-empty list of positive values")));
    }
    Ok(())
}

/// Percentage of samples within each tolerance (distance ≤ τ counts), in
/// the order given.
pub fn pixel_accuracy(pred: &[[f64; 2]], gt: &[[f64; 2]], tolerances: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pairs(pred, gt)?;
    validate_tolerances(tolerances)?;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| distance(*p, *g)).collect();
    Ok(tolerances
        .iter()
        .map(|&t| {
            let hit = d.iter().filter(|&&v| v <= t).count();
            (t, 100.0 * hit as f64 / d.len() as f64)
        })
        .collect())
}

/// `(total, mean)` Euclidean distance.
pub fn euclidean_distance(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<(f64, f64)> {
    check_pairs(pred, gt)?;
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| distance(*p, *g)).sum();
    Ok((total, total / pred.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub p_acc: Vec<(f64, f64)>,
    pub total_euclidean: f64,
    pub mean_euclidean: f64,
    pub n_samples: usize,
    pub pixel_space: PixelSpace,
}

impl EvalReport {
    pub fn from_points(pred: &[[f64; 2]], gt: &[[f64; 2]], tolerances: &[f64], space: PixelSpace) -> Result<Self> {
        let p_acc = pixel_accuracy(pred, gt, tolerances)?;
        let (total, mean) = euclidean_distance(pred, gt)?;
        Ok(EvalReport {
            p_acc,
            total_euclidean: total,
            mean_euclidean: mean,
            n_samples: pred.len(),
            pixel_space: space,
        })
    }

    pub fn p_acc_at(&self, tolerance: f64) -> Option<f64> {
        self.p_acc.iter().find(|(t, _)| *t == tolerance).map(|(_, p)| *p)
    }

    /// `tolerance,p_acc` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tolerance,p_acc\n");
        for (t, p) in &self.p_acc {
            let _ = writeln!(s, "{t},{p}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>10}  {:>8}\n", "tolerance", "p_acc%");
        for (t, p) in &self.p_acc {
            let _ = writeln!(s, "{t:>10}  {p:>8.2}");
        }
        let _ = writeln!(s, "{:>10}  {:>8.3}", "mean_dist", self.mean_euclidean);
        let _ = writeln!(s, "{:>10}  {:>8.3}", "total", self.total_euclidean);
        let _ = writeln!(s, "{:>10}  {:>8}", "samples", self.n_samples);
        let _ = writeln!(s, "{:>10}  {:>8}", "space", self.pixel_space.name());
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub tolerances: Vec<f64>,
    pub pixel_space: PixelSpace,
    /// Factor the frames were downscaled by; sensor space divides by it.
    pub spatial_factor: f64,
    pub exclude_closed: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tolerances: DEFAULT_TOLERANCES.to_vec(),
            pixel_space: PixelSpace::Downsampled,
            spatial_factor: DEFAULT_SPATIAL_FACTOR,
            exclude_closed: false,
            batch_size: 32,
        }
    }
}

impl EvalOptions {
    /// Multiplier from normalized `(x, y)` to the requested pixel space.
    pub fn scale(&self, width: usize, height: usize) -> Result<[f64; 2]> {
        let base = [width as f64, height as f64];
        match self.pixel_space {
            PixelSpace::Downsampled => Ok(base),
            PixelSpace::Sensor => {
                if !(self.spatial_factor > 0.0 && self.spatial_factor <= 1.0) {
                    return Err(Error::Config(format!("spatial factor {} outside (0, 1]", self.spatial_factor)));
                }
                Ok([base[0] / self.spatial_factor, base[1] / self.spatial_factor])
            }
        }
    }
}

pub fn check_frame_rate(windows: &[SampleWindow]) -> Result<()> {
    let want = DEFAULT_FRAME_DURATION_US as f64;
    for w in windows {
        if ((w.frame_duration as f64 - want) / want).abs() > 0.01 {
            return Err(Error::Contract(format!(
                "evaluation runs at 20 Hz; window has {} µs frames",
                w.frame_duration
            )));
        }
    }
    Ok(())
}

/// Pixel-space `(pred, gt)` pairs over every frame of every window.
pub fn collect_points(
    model: &Model,
    store: &ParameterStore,
    windows: &[SampleWindow],
    opts: &EvalOptions,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for chunk in windows.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let (frames, len, batch) = batch_frames(&refs)?;
        let out = model.predict(store, &frames, len, batch)?;
        for (b, w) in chunk.iter().enumerate() {
            let s = opts.scale(w.width, w.height)?;
            for l in 0..len {
                if opts.exclude_closed && w.close_mask[l] {
                    continue;
                }
                let p = out[l * batch + b];
                let t = w.targets[l];
                pred.push([p[0] * s[0], p[1] * s[1]]);
                gt.push([t[0] * s[0], t[1] * s[1]]);
            }
        }
    }
    Ok((pred, gt))
}

pub fn evaluate(model: &Model, store: &ParameterStore, windows: &[SampleWindow], opts: &EvalOptions) -> Result<EvalReport> {
    check_frame_rate(windows)?;
    validate_tolerances(&opts.tolerances)?;
    let (pred, gt) = collect_points(model, store, windows, opts)?;
    EvalReport::from_points(&pred, &gt, &opts.tolerances, opts.pixel_space)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_are_perfect() {
        let p = [[1.0, 2.0], [30.0, 4.5]];
        let r = pixel_accuracy(&p, &p, &[5.0, 10.0, 15.0]).unwrap();
        assert!(r.iter().all(|(_, v)| *v == 100.0));
        assert_eq!(euclidean_distance(&p, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn single_sample_at_distance_seven() {
        let r = pixel_accuracy(&[[7.0, 0.0]], &[[0.0, 0.0]], &[5.0, 10.0, 15.0]).unwrap();
        assert_eq!(r, vec![(5.0, 0.0), (10.0, 100.0), (15.0, 100.0)]);
    }

    #[test]
    fn half_within_five() {
        let r = pixel_accuracy(&[[3.0, 0.0], [0.0, 7.0]], &[[0.0, 0.0]; 2], &[5.0]).unwrap();
        assert_eq!(r, vec![(5.0, 50.0)]);
    }

    #[test]
    fn three_four_five() {
        assert_eq!(euclidean_distance(&[[3.0, 4.0]], &[[0.0, 0.0]]).unwrap(), (5.0, 5.0));
    }

    #[test]
    fn boundary_counts_as_correct() {
        let r = pixel_accuracy(&[[5.0, 0.0]], &[[0.0, 0.0]], &[5.0]).unwrap();
        assert_eq!(r[0].1, 100.0);
    }

    #[test]
    fn empty_input_is_contract_error() {
        assert!(matches!(pixel_accuracy(&[], &[], &[5.0]), Err(Error::Contract(_))));
        assert!(matches!(euclidean_distance(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::from_points(&[[3.0, 4.0]], &[[0.0, 0.0]], &[3.0, 6.0], PixelSpace::Downsampled).unwrap();
        assert_eq!(r.to_csv(), "tolerance,p_acc\n3,0\n6,100\n");
    }
}
