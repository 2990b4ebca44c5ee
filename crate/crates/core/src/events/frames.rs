use super::{EventStream, FrameSequence, FRAME_CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameNorm {
    None,
    #[default]
    Log1p,
    PerFrameMax,
}

impl FrameNorm {
    pub fn name(self) -> &'static str {
        match self {
            FrameNorm::None => "none",
            FrameNorm::Log1p => "log1p",
            FrameNorm::PerFrameMax => "per_frame_max",
        }
    }
}

impl std::str::FromStr for FrameNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FrameNorm::None),
            "log1p" => Ok(FrameNorm::Log1p),
            "per_frame_max" => Ok(FrameNorm::PerFrameMax),
            other => Err(Error::Config(format!("unknown frame normalization '{other}'"))),
        }
    }
}

/// Bins the whole stream from t = 0; the last (possibly partial) frame is kept.
pub fn bin_to_frames(stream: &EventStream, frame_duration: u64) -> Result<FrameSequence> {
    if frame_duration == 0 {
        return Err(Error::Contract("frame duration must be positive".into()));
    }
    let n_frames = match stream.events().last() {
        Some(last) => (last.t + 1).div_ceil(frame_duration) as usize,
        None => 0,
    };
    bin_to_frames_span(stream, frame_duration, 0, n_frames)
}

/// Bins events with `origin_t <= t < origin_t + n_frames * frame_duration`;
/// anything outside the span is ignored.
pub fn bin_to_frames_span(
    stream: &EventStream,
    frame_duration: u64,
    origin_t: u64,
    n_frames: usize,
) -> Result<FrameSequence> {
    if frame_duration == 0 {
        return Err(Error::Contract("frame duration must be positive".into()));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let plane = h * w;
    let mut data = vec![0.0; n_frames * FRAME_CHANNELS * plane];
    let end_t = origin_t + n_frames as u64 * frame_duration;
    for e in stream.events() {
        if e.t < origin_t || e.t >= end_t {
            continue;
        }
        let i = ((e.t - origin_t) / frame_duration) as usize;
        let idx = (i * FRAME_CHANNELS + e.polarity.channel()) * plane + e.y as usize * w + e.x as usize;
        data[idx] += 1.0;
    }
    FrameSequence::new(data, n_frames, h, w, frame_duration, origin_t)
}

pub fn normalize_frames(frames: &FrameSequence, mode: FrameNorm) -> FrameSequence {
    let mut out = frames.clone();
    match mode {
        FrameNorm::None => {}
        FrameNorm::Log1p => out.data.iter_mut().for_each(|v| *v = v.ln_1p()),
        FrameNorm::PerFrameMax => {
            let n = frames.frame_size();
            if n > 0 {
                for chunk in out.data.chunks_mut(n) {
                    let max = chunk.iter().copied().fold(0.0, f64::max);
                    if max > 0.0 {
                        chunk.iter_mut().for_each(|v| *v /= max);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_events_two_frames() {
        let s = EventStream::new(
            8,
            6,
            vec![
                Event::new(10_000, 3, 2, Polarity::Positive),
                Event::new(60_000, 3, 2, Polarity::Negative),
            ],
        )
        .unwrap();
        let f = bin_to_frames(&s, 50_000).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.get(0, 0, 2, 3), 1.0);
        assert_eq!(f.get(1, 1, 2, 3), 1.0);
        assert_eq!(f.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn empty_stream_has_no_frames() {
        let s = EventStream::new(8, 6, vec![]).unwrap();
        assert_eq!(bin_to_frames(&s, 50_000).unwrap().len(), 0);
    }

    #[test]
    fn zero_duration_rejected() {
        let s = EventStream::new(8, 6, vec![]).unwrap();
        assert!(bin_to_frames(&s, 0).is_err());
    }

    fn random_stream(seed: u64, n: usize, w: u16, h: u16) -> EventStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events = (0..n)
            .map(|_| {
                let p = if rng.gen::<bool>() {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                Event::new(rng.gen_range(0..1_000_000), rng.gen_range(0..w), rng.gen_range(0..h), p)
            })
            .collect();
        EventStream::from_unsorted(w as u32, h as u32, events).unwrap()
    }

    #[test]
    fn matches_brute_force_histogram() {
        let s = random_stream(3, 1000, 16, 12);
        let d = 50_000;
        let f = bin_to_frames(&s, d).unwrap();
        for i in 0..f.len() {
            for c in 0..2 {
                for y in 0..12 {
                    for x in 0..16 {
                        let count = s
                            .events()
                            .iter()
                            .filter(|e| {
                                e.t / d == i as u64
                                    && e.polarity.channel() == c
                                    && e.x as usize == x
                                    && e.y as usize == y
                            })
                            .count();
                        assert_eq!(f.get(i, c, y, x), count as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_modes() {
        let data = vec![0.0, 2.0, 4.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let f = FrameSequence::new(data.clone(), 2, 1, 2, 50_000, 0).unwrap();
        assert_eq!(normalize_frames(&f, FrameNorm::None), f);
        let l = normalize_frames(&f, FrameNorm::Log1p);
        assert_eq!(l.data()[0], 0.0);
        assert!((l.data()[1] - 3f64.ln()).abs() < 1e-15);
        let m = normalize_frames(&f, FrameNorm::PerFrameMax);
        assert_eq!(m.data()[1], 0.5);
        assert_eq!(m.data()[2], 1.0);
        assert!(m.frame(1).iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn counts_conserved_within_span(seed in any::<u64>(), n in 0usize..400, frames in 0usize..30, origin in 0u64..200_000) {
            let s = random_stream(seed, n, 10, 7);
            let d = 40_000;
            let f = bin_to_frames_span(&s, d, origin, frames).unwrap();
            let in_span = s.events().iter().filter(|e| e.t >= origin && e.t < origin + frames as u64 * d).count();
            prop_assert_eq!(f.data().iter().sum::<f64>(), in_span as f64);
        }
    }
}
