use super::{FrameSequence, LabelTrack, SampleWindow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub seq_len: usize,
    pub stride: usize,
    pub drop_closed: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            seq_len: 30,
            stride: 30,
            drop_closed: false,
        }
    }
}

impl WindowSpec {
    pub fn apply(&self, frames: &FrameSequence, labels: &LabelTrack) -> Result<Vec<SampleWindow>> {
        make_windows(frames, labels, self.seq_len, self.stride, self.drop_closed)
    }
}

/// Cuts `seq_len`-frame windows every `stride` frames.
///
/// Frame `i` is paired with the label sampled at the end of its interval,
/// `origin_t + (i + 1) * frame_duration`. Frames whose end label lies outside
/// the track are not used.
pub fn make_windows(
    frames: &FrameSequence,
    labels: &LabelTrack,
    seq_len: usize,
    stride: usize,
    drop_closed: bool,
) -> Result<Vec<SampleWindow>> {
    if seq_len == 0 || stride == 0 {
        return Err(Error::Config("seq_len and stride must be positive".into()));
    }
    if frames.frame_duration() == 0 {
        return Err(Error::Contract("frame duration must be positive".into()));
    }
    let frame_rate = 1e6 / frames.frame_duration() as f64;
    if ((labels.rate_hz() - frame_rate) / frame_rate).abs() > 0.01 {
        return Err(Error::Contract(format!(
            "label rate {} Hz does not match the {frame_rate} Hz frame rate",
            labels.rate_hz()
        )));
    }
    let (h, w) = (frames.height() as f64, frames.width() as f64);
    let samples = labels.samples();
    let period = labels.period_us();

    // Label index per frame, None when the end-of-interval label is missing.
    let aligned: Vec<Option<usize>> = (0..frames.len())
        .map(|i| {
            let t0 = samples.first()?.t as f64;
            let end = frames.frame_end_t(i) as f64;
            let idx = ((end - t0) / period).round();
            if idx < 0.0 || idx as usize >= samples.len() {
                return None;
            }
            let idx = idx as usize;
            ((samples[idx].t as f64 - end).abs() <= period / 2.0).then_some(idx)
        })
        .collect();

    let mut windows = Vec::new();
    let mut start = 0;
    while start + seq_len <= frames.len() {
        let idxs: Option<Vec<usize>> = aligned[start..start + seq_len].iter().copied().collect();
        if let Some(idxs) = idxs {
            let close_mask: Vec<bool> = idxs.iter().map(|&j| samples[j].close).collect();
            if !(drop_closed && close_mask.iter().any(|c| *c)) {
                let targets = idxs
                    .iter()
                    .map(|&j| {
                        [
                            (samples[j].x / w).clamp(0.0, 1.0),
                            (samples[j].y / h).clamp(0.0, 1.0),
                        ]
                    })
                    .collect();
                let n = frames.frame_size();
                windows.push(SampleWindow {
                    frames: frames.data()[start * n..(start + seq_len) * n].to_vec(),
                    len: seq_len,
                    height: frames.height(),
                    width: frames.width(),
                    targets,
                    close_mask,
                    frame_duration: frames.frame_duration(),
                    start_frame: start,
                });
            }
        }
        start += stride;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::LabelSample;

    fn frames(t: usize) -> FrameSequence {
        let (h, w) = (60, 80);
        let data = (0..t * 2 * h * w).map(|i| (i % 5) as f64).collect();
        FrameSequence::new(data, t, h, w, 50_000, 0).unwrap()
    }

    fn labels(n: usize, closed: &[usize]) -> LabelTrack {
        let samples = (0..n)
            .map(|i| LabelSample {
                t: i as u64 * 50_000,
                x: 40.0,
                y: 30.0,
                close: closed.contains(&i),
            })
            .collect();
        LabelTrack::new(20.0, samples).unwrap()
    }

    #[test]
    fn exact_tiling() {
        let ws = make_windows(&frames(10), &labels(11, &[]), 5, 5, false).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].start_frame, 0);
        assert_eq!(ws[1].start_frame, 5);
        assert_eq!(ws[1].frame(0), frames(10).frame(5));
    }

    #[test]
    fn too_few_frames_gives_no_windows() {
        assert!(make_windows(&frames(4), &labels(5, &[]), 5, 5, false)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn target_is_normalized() {
        let ws = make_windows(&frames(3), &labels(4, &[]), 3, 3, false).unwrap();
        assert_eq!(ws[0].targets[0], [0.5, 0.5]);
    }

    #[test]
    fn target_uses_end_of_interval_label() {
        let mut l = labels(4, &[]).samples().to_vec();
        for (i, s) in l.iter_mut().enumerate() {
            s.x = i as f64;
        }
        let track = LabelTrack::new(20.0, l).unwrap();
        let ws = make_windows(&frames(3), &track, 3, 3, false).unwrap();
        let xs: Vec<f64> = ws[0].targets.iter().map(|t| t[0] * 80.0).collect();
        assert_eq!(xs, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn frames_without_end_label_are_skipped() {
        // 10 frames but only labels for the ends of the first 9.
        let ws = make_windows(&frames(10), &labels(10, &[]), 5, 5, false).unwrap();
        assert_eq!(ws.len(), 1);
    }

    #[test]
    fn closed_windows_dropped_or_masked() {
        let l = labels(11, &[7]);
        let kept = make_windows(&frames(10), &l, 5, 5, true).unwrap();
        assert_eq!(kept.len(), 1);
        let all = make_windows(&frames(10), &l, 5, 5, false).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].close_mask, vec![false, true, false, false, false]);
    }

    #[test]
    fn rate_mismatch_rejected() {
        let l = LabelTrack::new(100.0, vec![]).unwrap();
        assert!(matches!(
            make_windows(&frames(3), &l, 3, 3, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stride_equal_to_len_partitions() {
        let f = frames(23);
        let ws = make_windows(&f, &labels(24, &[]), 4, 4, false).unwrap();
        let mut used: Vec<usize> = ws
            .iter()
            .flat_map(|w| w.start_frame..w.start_frame + w.len)
            .collect();
        let n = used.len();
        used.dedup();
        assert_eq!(used.len(), n);
        assert_eq!(n, 20);
    }
}
