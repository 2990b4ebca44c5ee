use evtrack_core::events::SampleWindow;
use evtrack_core::metrics::{euclidean_distance, evaluate, pixel_accuracy, EvalOptions, EvalReport, PixelSpace};
use evtrack_core::models::{build_model, ModelConfig, Variant, HEAD_B, HEAD_W};
use evtrack_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut p = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for _ in 0..n {
        p.push([rng.gen_range(0.0..80.0), rng.gen_range(0.0..60.0)]);
        g.push([rng.gen_range(0.0..80.0), rng.gen_range(0.0..60.0)]);
    }
    (p, g)
}

#[test]
fn thousand_pairs_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (p, g) = pairs(&mut rng, 1000);
    let taus = [1.0, 5.0, 10.0, 15.0, 40.0];
    let acc = pixel_accuracy(&p, &g, &taus).unwrap();
    let mut total = 0.0;
    let mut hits = [0usize; 5];
    for i in 0..1000 {
        let dx = p[i][0] - g[i][0];
        let dy = p[i][1] - g[i][1];
        let d = (dx * dx + dy * dy).sqrt();
        total += d;
        for (k, t) in taus.iter().enumerate() {
            if d <= *t {
                hits[k] += 1;
            }
        }
    }
    for (k, (t, pct)) in acc.iter().enumerate() {
        assert_eq!(*t, taus[k]);
        assert_eq!(*pct, 100.0 * hits[k] as f64 / 1000.0);
    }
    let (tot, mean) = euclidean_distance(&p, &g).unwrap();
    assert!((tot - total).abs() <= 1e-12 * total);
    assert!((mean - total / 1000.0).abs() <= 1e-12 * mean);
}

#[test]
fn p_acc_is_monotone_in_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.gen_range(1..50);
        let (p, g) = pairs(&mut rng, n);
        let mut taus: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..60.0)).collect();
        taus.sort_by(f64::total_cmp);
        let r = EvalReport::from_points(&p, &g, &taus, PixelSpace::Downsampled).unwrap();
        for w in r.p_acc.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        assert!(r.p_acc.iter().all(|(_, v)| (0.0..=100.0).contains(v)));
        assert!((r.total_euclidean - r.mean_euclidean * n as f64).abs() <= 1e-9 * r.total_euclidean.max(1.0));
    }
}

#[test]
fn translation_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, g) = pairs(&mut rng, 200);
    // shifts and scales by powers of two keep every value exact
    let shift = |v: &[[f64; 2]]| v.iter().map(|a| [a[0] + 16.0, a[1] - 32.0]).collect::<Vec<_>>();
    let scale = |v: &[[f64; 2]]| v.iter().map(|a| [a[0] * 8.0, a[1] * 8.0]).collect::<Vec<_>>();
    let base = EvalReport::from_points(&p, &g, &[5.0, 10.0], PixelSpace::Downsampled).unwrap();
    let moved = EvalReport::from_points(&shift(&p), &shift(&g), &[5.0, 10.0], PixelSpace::Downsampled).unwrap();
    assert_eq!(base.p_acc, moved.p_acc);
    assert!((base.total_euclidean - moved.total_euclidean).abs() <= 1e-9);
    let big = EvalReport::from_points(&scale(&p), &scale(&g), &[40.0, 80.0], PixelSpace::Sensor).unwrap();
    assert_eq!(big.total_euclidean, 8.0 * base.total_euclidean);
    assert_eq!(big.p_acc[0].1, base.p_acc[0].1);
    assert_eq!(big.p_acc[1].1, base.p_acc[1].1);
}

#[test]
fn dropping_a_sample_removes_its_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, g) = pairs(&mut rng, 50);
    let (all, _) = euclidean_distance(&p, &g).unwrap();
    let (rest, _) = euclidean_distance(&p[..49], &g[..49]).unwrap();
    let d = ((p[49][0] - g[49][0]).powi(2) + (p[49][1] - g[49][1]).powi(2)).sqrt();
    assert_eq!(rest + d, all);
}

fn constant_centre_fixture() -> (evtrack_core::models::Model, evtrack_core::autodiff::ParameterStore, Vec<SampleWindow>) {
    let cfg = ModelConfig {
        conv_channels: vec![2, 2, 2],
        feature_dim: 4,
        hidden: 4,
        ..ModelConfig::new(Variant::CnnGru)
    };
    let (model, mut store) = build_model(&cfg).unwrap();
    // a zero head makes every output sigmoid(0) = 0.5, the frame centre
    for name in [HEAD_W, HEAD_B] {
        store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let windows = (0..6)
        .map(|_| SampleWindow {
            frames: (0..5 * 2 * 60 * 80).map(|_| rng.gen_range(0.0..1.0)).collect(),
            len: 5,
            height: 60,
            width: 80,
            targets: (0..5).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect(),
            close_mask: vec![false; 5],
            frame_duration: 50_000,
            start_frame: 0,
        })
        .collect();
    (model, store, windows)
}

#[test]
fn constant_centre_predictor_matches_direct_mean() {
    let (model, store, windows) = constant_centre_fixture();
    let report = evaluate(&model, &store, &windows, &EvalOptions::default()).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for w in &windows {
        for t in &w.targets {
            sum += ((t[0] * 80.0 - 40.0).powi(2) + (t[1] * 60.0 - 30.0).powi(2)).sqrt();
            n += 1;
        }
    }
    assert_eq!(report.n_samples, n);
    assert!((report.mean_euclidean - sum / n as f64).abs() <= 1e-12 * report.mean_euclidean);

    let sensor = evaluate(
        &model,
        &store,
        &windows,
        &EvalOptions {
            pixel_space: PixelSpace::Sensor,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(sensor.total_euclidean, 8.0 * report.total_euclidean);
}

#[test]
fn closed_frames_can_be_excluded_and_rate_is_checked() {
    let (model, store, mut windows) = constant_centre_fixture();
    windows[0].close_mask[2] = true;
    let opts = EvalOptions {
        exclude_closed: true,
        tolerances: vec![3.0, 6.0],
        ..EvalOptions::default()
    };
    let r = evaluate(&model, &store, &windows, &opts).unwrap();
    assert_eq!(r.n_samples, 29);
    assert_eq!(r.p_acc.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3.0, 6.0]);
    windows[1].frame_duration = 10_000;
    assert!(matches!(evaluate(&model, &store, &windows, &opts), Err(Error::Contract(_))));
}
