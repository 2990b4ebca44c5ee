use evtrack_core::events::Polarity;
use evtrack_core::synth::{
    gen_trajectory, in_disc, render_events, synthesize, SceneState, TrajectoryConfig, TrajectoryKind, TICK_US,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(kind: TrajectoryKind, seconds: f64, seed: u64) -> TrajectoryConfig {
    let mut c = TrajectoryConfig::new(kind, seconds, seed);
    c.width = 128;
    c.height = 96;
    c.radius = 10.0;
    c.pursuit_amplitude = 30.0;
    c
}

/// Counts `(x, y)` whose membership differs, by scanning the whole sensor.
fn brute_diff(prev: [f64; 2], cur: [f64; 2], r: f64, w: u32, h: u32) -> (usize, usize) {
    let (mut neg, mut pos) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            match (in_disc(x, y, prev, r), in_disc(x, y, cur, r)) {
                (false, true) => neg += 1,
                (true, false) => pos += 1,
                _ => {}
            }
        }
    }
    (neg, pos)
}

#[test]
fn one_pixel_per_tick_motion_matches_symmetric_difference() {
    let cfg = small(TrajectoryKind::Fixation, 0.05, 1);
    let scene = SceneState {
        centers: (0..50).map(|k| [20.3 + k as f64, 40.7]).collect(),
        open: vec![true; 50],
    };
    let (ev, _) = render_events(&scene, &cfg).unwrap();
    for k in 1..50 {
        let lo = k as u64 * TICK_US;
        let tick: Vec<_> = ev.events().iter().filter(|e| e.t >= lo && e.t < lo + TICK_US).collect();
        let neg = tick.iter().filter(|e| e.polarity == Polarity::Negative).count();
        let (bn, bp) = brute_diff(scene.centers[k - 1], scene.centers[k], cfg.radius, cfg.width, cfg.height);
        assert_eq!((neg, tick.len() - neg), (bn, bp), "tick {k}");
    }
}

#[test]
fn random_ticks_match_symmetric_difference() {
    let cfg = small(TrajectoryKind::SaccadeMix, 3.0, 21);
    let scene = gen_trajectory(&cfg).unwrap();
    let (ev, _) = render_events(&scene, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..40 {
        let k = rng.gen_range(1..scene.len());
        let lo = k as u64 * TICK_US;
        let n = ev.events().iter().filter(|e| e.t >= lo && e.t < lo + TICK_US).count();
        let (a, b) = brute_diff(scene.centers[k - 1], scene.centers[k], cfg.radius, cfg.width, cfg.height);
        assert_eq!(n, a + b, "tick {k}");
    }
}

#[test]
fn two_seconds_give_two_hundred_labels_matching_centers() {
    let cfg = small(TrajectoryKind::SmoothPursuit, 2.0, 3);
    let scene = gen_trajectory(&cfg).unwrap();
    let (ev, labels) = render_events(&scene, &cfg).unwrap();
    assert_eq!(labels.len(), 200);
    for s in labels.samples() {
        let k = (s.t / TICK_US) as usize;
        assert_eq!([s.x, s.y], scene.centers[k]);
        assert_eq!(s.t % 10_000, 0);
    }
    assert!(ev.events().iter().all(|e| (e.x as u32) < cfg.width && (e.y as u32) < cfg.height));
}

#[test]
fn same_seed_same_output() {
    for kind in TrajectoryKind::ALL {
        let cfg = small(kind, 1.0, 7);
        assert_eq!(gen_trajectory(&cfg).unwrap(), gen_trajectory(&cfg).unwrap());
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn blinks_are_silent_and_flagged_closed() {
    let cfg = small(TrajectoryKind::BlinkCycle, 6.0, 9);
    let scene = gen_trajectory(&cfg).unwrap();
    let (ev, labels) = render_events(&scene, &cfg).unwrap();
    let closed: Vec<usize> = (0..scene.len()).filter(|&k| !scene.open[k]).collect();
    assert!(!closed.is_empty());
    for &k in &closed {
        let lo = k as u64 * TICK_US;
        assert!(!ev.events().iter().any(|e| e.t >= lo && e.t < lo + TICK_US), "tick {k}");
    }
    for s in labels.samples() {
        assert_eq!(s.close, !scene.open[(s.t / TICK_US) as usize]);
    }
    assert!(labels.samples().iter().any(|s| s.close));
}

#[test]
fn noise_events_are_seeded_and_in_bounds() {
    let mut cfg = small(TrajectoryKind::Fixation, 1.0, 4);
    cfg.noise_rate_hz = 5000.0;
    let (a, _) = synthesize(&cfg).unwrap();
    let mut quiet = cfg.clone();
    quiet.noise_rate_hz = 0.0;
    let (b, _) = synthesize(&quiet).unwrap();
    assert!(a.len() > b.len() + 3000);
    assert_eq!(a, synthesize(&cfg).unwrap().0);
}
