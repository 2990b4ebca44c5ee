//! Synthetic event camera: a dark pupil disc moving over a bright background,
//! simulated on a 1 ms tick, with exact 100 Hz ground truth.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, LabelSample, LabelTrack, Polarity, DEFAULT_LABEL_RATE_HZ, DEFAULT_SENSOR_HEIGHT, DEFAULT_SENSOR_WIDTH};

pub const TICKS_PER_SECOND: usize = 1000;
pub const TICK_US: u64 = 1000;
/// Longest saccade.
pub const MAX_SACCADE_TICKS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Fixation,
    SmoothPursuit,
    SaccadeMix,
    BlinkCycle,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 4] = [
        TrajectoryKind::Fixation,
        TrajectoryKind::SmoothPursuit,
        TrajectoryKind::SaccadeMix,
        TrajectoryKind::BlinkCycle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Fixation => "fixation",
            TrajectoryKind::SmoothPursuit => "smooth_pursuit",
            TrajectoryKind::SaccadeMix => "saccade_mix",
            TrajectoryKind::BlinkCycle => "blink_cycle",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrajectoryKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown trajectory kind '{s}' (expected fixation, smooth_pursuit, saccade_mix or blink_cycle)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    pub seconds: f64,
    pub width: u32,
    pub height: u32,
    pub radius: f64,
    /// Fixation jitter, 2-D RMS in pixels.
    pub jitter_rms: f64,
    pub px_per_degree: f64,
    /// Peak smooth-pursuit speed.
    pub pursuit_speed_deg_s: f64,
    /// Horizontal pursuit amplitude in pixels; vertical is half of it.
    pub pursuit_amplitude: f64,
    /// Peak saccade speed.
    pub saccade_speed_deg_s: f64,
    /// Uniform background noise events per second over the whole sensor.
    pub noise_rate_hz: f64,
    /// Fixation point or sweep centre; seeded when absent.
    pub center: Option<[f64; 2]>,
    pub seed: u64,
}

impl TrajectoryConfig {
    pub fn new(kind: TrajectoryKind, seconds: f64, seed: u64) -> Self {
        TrajectoryConfig {
            kind,
            seconds,
            width: DEFAULT_SENSOR_WIDTH,
            height: DEFAULT_SENSOR_HEIGHT,
            radius: 32.0,
            jitter_rms: 0.4,
            px_per_degree: 20.0,
            pursuit_speed_deg_s: 20.0,
            pursuit_amplitude: 120.0,
            saccade_speed_deg_s: 300.0,
            noise_rate_hz: 0.0,
            center: None,
            seed,
        }
    }

    pub fn ticks(&self) -> usize {
        (self.seconds * TICKS_PER_SECOND as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.seconds > 0.0 && self.seconds.is_finite()) {
            return bad(format!("duration {} s must be positive", self.seconds));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as u32 + 1 || self.height > u16::MAX as u32 + 1 {
            return bad(format!("sensor {}×{} out of range", self.width, self.height));
        }
        if !(self.radius > 0.0) || 2.0 * self.radius >= self.width.min(self.height) as f64 {
            return bad(format!("radius {} does not fit a {}×{} sensor", self.radius, self.width, self.height));
        }
        for (name, v) in [
            ("jitter_rms", self.jitter_rms),
            ("pursuit_amplitude", self.pursuit_amplitude),
            ("noise_rate_hz", self.noise_rate_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        for (name, v) in [
            ("px_per_degree", self.px_per_degree),
            ("pursuit_speed_deg_s", self.pursuit_speed_deg_s),
            ("saccade_speed_deg_s", self.saccade_speed_deg_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("kind", self.kind);
        m.set("seconds", self.seconds);
        m.set("width", self.width);
        m.set("height", self.height);
        m.set("radius", self.radius);
        m.set("jitter_rms", self.jitter_rms);
        m.set("px_per_degree", self.px_per_degree);
        m.set("pursuit_speed_deg_s", self.pursuit_speed_deg_s);
        m.set("pursuit_amplitude", self.pursuit_amplitude);
        m.set("saccade_speed_deg_s", self.saccade_speed_deg_s);
        m.set("noise_rate_hz", self.noise_rate_hz);
        if let Some([x, y]) = self.center {
            m.set("center_x", x);
            m.set("center_y", y);
        }
        m.set("seed", self.seed);
        m
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let kind = kv
            .parsed::<TrajectoryKind>("kind")?
            .ok_or_else(|| Error::Config("missing 'kind'".into()))?;
        let mut c = TrajectoryConfig::new(kind, 10.0, 42);
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.parsed(stringify!($f))? {
                    c.$f = v;
                }
            )*};
        }
        take!(seconds, width, height, radius, jitter_rms, px_per_degree, pursuit_speed_deg_s, pursuit_amplitude, saccade_speed_deg_s, noise_rate_hz, seed);
        match (kv.parsed::<f64>("center_x")?, kv.parsed::<f64>("center_y")?) {
            (Some(x), Some(y)) => c.center = Some([x, y]),
            (None, None) => {}
            _ => return Err(Error::Config("center_x and center_y go together".into())),
        }
        c.validate()?;
        Ok(c)
    }
}

/// Pupil centre and eye-open flag per 1 ms tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub centers: Vec<[f64; 2]>,
    pub open: Vec<bool>,
}

impl SceneState {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Offset of a sinusoidal sweep of amplitude `a` at `phase` radians.
pub fn pursuit_offset(a: f64, phase: f64) -> f64 {
    a * phase.sin()
}

struct Bounds {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Bounds {
    fn new(cfg: &TrajectoryConfig, slack: f64) -> Self {
        let m = cfg.radius + slack;
        Bounds {
            lo: [m, m],
            hi: [cfg.width as f64 - m, cfg.height as f64 - m],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        [rng.gen_range(self.lo[0]..=self.hi[0]), rng.gen_range(self.lo[1]..=self.hi[1])]
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }
}

/// Fixation around `p`: a jitter offset redrawn every 10–20 ms, clamped to
/// three standard deviations per axis.
fn fixate(out: &mut Vec<[f64; 2]>, p: [f64; 2], ticks: usize, rms: f64, rng: &mut ChaCha8Rng) {
    let sigma = rms / std::f64::consts::SQRT_2;
    let mut left = 0;
    let mut off = [0.0, 0.0];
    for _ in 0..ticks {
        if left == 0 {
            left = rng.gen_range(10..=20);
            off = match Normal::new(0.0, sigma) {
                Ok(n) if sigma > 0.0 => [
                    n.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma),
                    n.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma),
                ],
                _ => [0.0, 0.0],
            };
        }
        left -= 1;
        out.push([p[0] + off[0], p[1] + off[1]]);
    }
}

fn jitter_slack(cfg: &TrajectoryConfig) -> f64 {
    3.0 * cfg.jitter_rms / std::f64::consts::SQRT_2
}

pub fn gen_trajectory(cfg: &TrajectoryConfig) -> Result<SceneState> {
    cfg.validate()?;
    let n = cfg.ticks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slack = jitter_slack(cfg);
    let inner = Bounds::new(cfg, slack);
    if !(inner.lo[0] <= inner.hi[0] && inner.lo[1] <= inner.hi[1]) {
        return Err(Error::Config("sensor too small for radius plus jitter".into()));
    }
    let start = match cfg.center {
        Some(c) => c,
        None if cfg.kind == TrajectoryKind::SmoothPursuit => {
            // leave room for the sweep itself
            let (ax, ay) = (cfg.pursuit_amplitude, 0.5 * cfg.pursuit_amplitude);
            let room = Bounds {
                lo: [inner.lo[0] + ax, inner.lo[1] + ay],
                hi: [inner.hi[0] - ax, inner.hi[1] - ay],
            };
            if !(room.lo[0] <= room.hi[0] && room.lo[1] <= room.hi[1]) {
                return Err(Error::Config(format!(
                    "pursuit amplitude {} does not fit a {}×{} sensor with radius {}",
                    cfg.pursuit_amplitude, cfg.width, cfg.height, cfg.radius
                )));
            }
            room.sample(&mut rng)
        }
        None => inner.sample(&mut rng),
    };
    let mut centers = Vec::with_capacity(n);
    let mut open = vec![true; n];
    match cfg.kind {
        TrajectoryKind::Fixation => fixate(&mut centers, start, n, cfg.jitter_rms, &mut rng),
        TrajectoryKind::SmoothPursuit => {
            let ax = cfg.pursuit_amplitude;
            let ay = 0.5 * ax;
            let speed = cfg.pursuit_speed_deg_s * cfg.px_per_degree;
            // x carries the peak speed; y runs slower on a seeded phase
            let wx = if ax > 0.0 { speed / ax } else { 0.0 };
            let wy = 0.7 * wx;
            let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
            for k in 0..n {
                let t = k as f64 / TICKS_PER_SECOND as f64;
                centers.push([start[0] + pursuit_offset(ax, wx * t), start[1] + pursuit_offset(ay, wy * t + phase_y)]);
            }
        }
        TrajectoryKind::SaccadeMix => {
            let vpeak = cfg.saccade_speed_deg_s * cfg.px_per_degree / TICKS_PER_SECOND as f64;
            // half-sine profile: amplitude = 2·vpeak·D/π
            let max_amp = 2.0 * vpeak * MAX_SACCADE_TICKS as f64 / std::f64::consts::PI;
            let mut p = start;
            while centers.len() < n {
                let hold = rng.gen_range(150..=400).min(n - centers.len());
                fixate(&mut centers, p, hold, cfg.jitter_rms, &mut rng);
                if centers.len() >= n {
                    break;
                }
                let from = *centers.last().unwrap();
                let mut to = inner.sample(&mut rng);
                let d = [to[0] - from[0], to[1] - from[1]];
                let len = d[0].hypot(d[1]);
                let amp = len.min(max_amp.min(rng.gen_range(0.3 * max_amp..=max_amp)));
                if len > 0.0 {
                    to = [from[0] + d[0] / len * amp, from[1] + d[1] / len * amp];
                }
                let dur = ((std::f64::consts::PI * amp / (2.0 * vpeak)).ceil() as usize).clamp(1, MAX_SACCADE_TICKS);
                for k in 1..=dur {
                    if centers.len() >= n {
                        break;
                    }
                    // integral of the half-sine velocity profile
                    let s = (1.0 - (std::f64::consts::PI * k as f64 / dur as f64).cos()) / 2.0;
                    centers.push([from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])]);
                }
                p = to;
            }
        }
        TrajectoryKind::BlinkCycle => {
            fixate(&mut centers, start, n, cfg.jitter_rms, &mut rng);
            let mut k = rng.gen_range(300..1200);
            while k < n {
                let closed = rng.gen_range(100..=300);
                open[k..(k + closed).min(n)].iter_mut().for_each(|o| *o = false);
                k += closed + rng.gen_range(700..1700);
            }
        }
    }
    let outer = Bounds::new(cfg, 0.0);
    if let Some(k) = centers.iter().position(|c| !outer.contains(*c)) {
        return Err(Error::Config(format!(
            "trajectory leaves the {}-px margin at tick {k} ({:.1}, {:.1})",
            cfg.radius, centers[k][0], centers[k][1]
        )));
    }
    Ok(SceneState { centers, open })
}

/// Whether the centre of pixel `(x, y)` lies in the disc.
pub fn in_disc(x: u32, y: u32, c: [f64; 2], r: f64) -> bool {
    let dx = x as f64 + 0.5 - c[0];
    let dy = y as f64 + 0.5 - c[1];
    dx * dx + dy * dy <= r * r
}

fn disc_box(c: [f64; 2], r: f64, w: u32, h: u32) -> [u32; 4] {
    let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
    [
        clamp((c[0] - r - 1.0).floor(), w),
        clamp((c[1] - r - 1.0).floor(), h),
        clamp((c[0] + r + 1.0).ceil(), w),
        clamp((c[1] + r + 1.0).ceil(), h),
    ]
}

/// Pixels whose membership differs between the discs at `prev` and `cur`
/// (either may be absent), with the polarity of the change, row-major.
pub fn membership_changes(prev: Option<[f64; 2]>, cur: Option<[f64; 2]>, r: f64, w: u32, h: u32) -> Vec<(u32, u32, Polarity)> {
    let boxes: Vec<[u32; 4]> = [prev, cur].into_iter().flatten().map(|c| disc_box(c, r, w, h)).collect();
    let Some(first) = boxes.first() else { return Vec::new() };
    let b = boxes.iter().fold(*first, |a, b| [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    let mut out = Vec::new();
    for y in b[1]..b[3] {
        for x in b[0]..b[2] {
            let was = prev.is_some_and(|c| in_disc(x, y, c, r));
            let now = cur.is_some_and(|c| in_disc(x, y, c, r));
            if was != now {
                // darkening into the pupil is a negative change
                out.push((x, y, if now { Polarity::Negative } else { Polarity::Positive }));
            }
        }
    }
    out
}

/// Events per tick from disc-membership changes, plus 100 Hz labels.
/// While the eye is closed nothing is emitted and the last open disc is held,
/// so reopening emits the difference against it.
pub fn render_events(scene: &SceneState, cfg: &TrajectoryConfig) -> Result<(EventStream, LabelTrack)> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd17e_4e7e_0000_0001);
    let mut events = Vec::new();
    let mut shown: Option<[f64; 2]> = None;
    let noise = Poisson::new(cfg.noise_rate_hz / TICKS_PER_SECOND as f64).ok();
    let mut tick_events = Vec::new();
    for (k, (&c, &open)) in scene.centers.iter().zip(&scene.open).enumerate() {
        tick_events.clear();
        let t0 = k as u64 * TICK_US;
        if open && shown != Some(c) {
            for (x, y, p) in membership_changes(shown, Some(c), cfg.radius, w, h) {
                tick_events.push(Event::new(t0 + rng.gen_range(0..TICK_US), x as u16, y as u16, p));
            }
            shown = Some(c);
        }
        let n_noise = noise.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        for _ in 0..n_noise {
            let p = if rng.gen() { Polarity::Positive } else { Polarity::Negative };
            tick_events.push(Event::new(
                t0 + rng.gen_range(0..TICK_US),
                rng.gen_range(0..w) as u16,
                rng.gen_range(0..h) as u16,
                p,
            ));
        }
        tick_events.sort_by_key(|e| e.t);
        events.extend_from_slice(&tick_events);
    }
    let stream = EventStream::new(w, h, events)?;
    let step = TICKS_PER_SECOND / DEFAULT_LABEL_RATE_HZ as usize;
    let samples = (0..scene.len())
        .step_by(step)
        .map(|k| LabelSample {
            t: k as u64 * TICK_US,
            x: scene.centers[k][0],
            y: scene.centers[k][1],
            close: !scene.open[k],
        })
        .collect();
    let labels = LabelTrack::new(DEFAULT_LABEL_RATE_HZ, samples)?;
    Ok((stream, labels))
}

pub fn synthesize(cfg: &TrajectoryConfig) -> Result<(EventStream, LabelTrack)> {
    render_events(&gen_trajectory(cfg)?, cfg)
}

pub const FIXTURE_NAME: &str = "synthetic-13";
pub const FIXTURE_SESSIONS: usize = 13;
pub const FIXTURE_SESSION_SECONDS: f64 = 4.6;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSession {
    pub name: String,
    pub cfg: TrajectoryConfig,
}

/// Thirteen sessions cycling through the four trajectory kinds, about 60 s
/// in total, with per-session seeds derived from `seed`.
pub fn synthetic_13(seed: u64) -> Vec<FixtureSession> {
    (0..FIXTURE_SESSIONS)
        .map(|i| {
            let kind = TrajectoryKind::ALL[i % 4];
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            FixtureSession {
                name: format!("session_{:02}", i + 1),
                cfg: TrajectoryConfig::new(kind, FIXTURE_SESSION_SECONDS, s),
            }
        })
        .collect()
}

/// `session_NN.<key> = value` lines describing a fixture.
pub fn fixture_manifest(sessions: &[FixtureSession]) -> KvMap {
    let mut m = KvMap::new();
    m.set("fixture", FIXTURE_NAME);
    m.set("sessions", sessions.len());
    for s in sessions {
        for (k, v) in s.cfg.to_kv().iter() {
            m.set(&format!("{}.{k}", s.name), v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(kind: TrajectoryKind) -> TrajectoryConfig {
        let mut c = TrajectoryConfig::new(kind, 0.5, 7);
        c.width = 96;
        c.height = 80;
        c.radius = 8.0;
        c.pursuit_amplitude = 20.0;
        c
    }

    #[test]
    fn fixation_without_jitter_is_constant() {
        let mut c = fixed(TrajectoryKind::Fixation);
        c.jitter_rms = 0.0;
        c.center = Some([40.0, 30.0]);
        let s = gen_trajectory(&c).unwrap();
        assert_eq!(s.len(), 500);
        assert!(s.centers.iter().all(|p| *p == [40.0, 30.0]));
        let (ev, _) = render_events(&s, &c).unwrap();
        assert!(ev.events().iter().all(|e| e.t < TICK_US));
        assert!(ev.events().iter().all(|e| e.polarity == Polarity::Negative));
    }

    #[test]
    fn pursuit_quarter_period_reaches_amplitude() {
        assert_eq!(pursuit_offset(12.5, std::f64::consts::FRAC_PI_2), 12.5);
        let mut c = fixed(TrajectoryKind::SmoothPursuit);
        c.center = Some([48.0, 40.0]);
        c.seconds = 2.0;
        let s = gen_trajectory(&c).unwrap();
        // wx = 400 px/s / 20 px; quarter period at t = π/2 / 20 s
        let k = (std::f64::consts::FRAC_PI_2 / 20.0 * 1000.0).round() as usize;
        assert!((s.centers[k][0] - (48.0 + 20.0)).abs() < 0.01);
    }

    #[test]
    fn jitter_is_bounded_in_rms() {
        let mut c = TrajectoryConfig::new(TrajectoryKind::Fixation, 20.0, 3);
        c.center = Some([320.0, 240.0]);
        let s = gen_trajectory(&c).unwrap();
        let ms: f64 = s.centers.iter().map(|p| (p[0] - 320.0).powi(2) + (p[1] - 240.0).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(ms.sqrt() <= 0.5, "{}", ms.sqrt());
    }

    #[test]
    fn saccades_are_short_and_within_speed() {
        let c = TrajectoryConfig::new(TrajectoryKind::SaccadeMix, 10.0, 11);
        let s = gen_trajectory(&c).unwrap();
        let vmax = c.saccade_speed_deg_s * c.px_per_degree / 1000.0;
        let mut run = 0;
        for w in s.centers.windows(2) {
            let v = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            // jitter redraws move at most a few px; anything faster is a saccade
            if v > 3.0 {
                run += 1;
                assert!(v <= vmax * std::f64::consts::PI / 2.0 + 1e-9, "{v}");
            } else {
                assert!(run <= MAX_SACCADE_TICKS);
                run = 0;
            }
        }
    }

    #[test]
    fn blink_intervals_last_100_to_300_ms() {
        let c = TrajectoryConfig::new(TrajectoryKind::BlinkCycle, 10.0, 5);
        let s = gen_trajectory(&c).unwrap();
        let mut runs = Vec::new();
        let mut cur = 0;
        for &o in &s.open {
            if !o {
                cur += 1;
            } else if cur > 0 {
                runs.push(cur);
                cur = 0;
            }
        }
        assert!(!runs.is_empty());
        assert!(runs.iter().all(|&r| (100..=300).contains(&r)), "{runs:?}");
    }

    #[test]
    fn margin_violation_is_config_error() {
        let mut c = fixed(TrajectoryKind::SmoothPursuit);
        c.pursuit_amplitude = 60.0;
        c.center = Some([48.0, 40.0]);
        assert!(matches!(gen_trajectory(&c), Err(Error::Config(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("saccade_mix".parse::<TrajectoryKind>().unwrap(), TrajectoryKind::SaccadeMix);
        assert!(matches!("unknown".parse::<TrajectoryKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn fixture_totals_about_a_minute() {
        let f = synthetic_13(42);
        assert_eq!(f.len(), 13);
        let total: f64 = f.iter().map(|s| s.cfg.seconds).sum();
        assert!((total - 60.0).abs() < 1.0);
        let kinds: std::collections::HashSet<_> = f.iter().map(|s| s.cfg.kind).collect();
        assert_eq!(kinds.len(), 4);
    }
}
