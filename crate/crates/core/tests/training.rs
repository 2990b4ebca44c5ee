use std::time::Instant;

use evtrack_core::autodiff::{Mode, ParameterStore, Tape};
use evtrack_core::events::{prepare_windows, DataConfig, SampleWindow};
use evtrack_core::models::{batch_frames, build_model, Model, ModelConfig, Variant};
use evtrack_core::synth::{synthesize, TrajectoryConfig, TrajectoryKind};
use evtrack_core::training::{
    adam_step, load_checkpoint, resume, save_checkpoint, train, train_step, weighted_mse, AdamState, Checkpoint,
    CheckpointSink, TrainConfig,
};
use evtrack_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows(kind: TrajectoryKind, seconds: f64, seed: u64) -> Vec<SampleWindow> {
    let (ev, labels) = synthesize(&TrajectoryConfig::new(kind, seconds, seed)).unwrap();
    let cfg = DataConfig {
        seq_len: 10,
        stride: 10,
        ..DataConfig::default()
    };
    prepare_windows(&ev, &labels, &cfg).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![2, 3, 4],
        feature_dim: 8,
        hidden: 8,
        dropout: 0.1,
        ..ModelConfig::new(Variant::CnnLstm)
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 3e-3,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_one_batch_one_row() {
    let data = windows(TrajectoryKind::Fixation, 1.2, 1);
    assert!(data.len() >= 2);
    let cfg = TrainConfig {
        epochs: 1,
        val_split: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&small_model(), &data[..2], &cfg, None).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert!(out.report.epochs[0].train_loss.is_finite());
    assert!(out.report.epochs[0].val_loss.is_nan());
}

#[test]
fn loss_halves_on_twenty_windows() {
    let data = windows(TrajectoryKind::SmoothPursuit, 10.5, 42);
    let data = &data[..20];
    let model = ModelConfig {
        conv_channels: vec![4, 8, 8],
        feature_dim: 32,
        hidden: 32,
        rnn_layers: 2,
        dropout: 0.1,
        ..ModelConfig::new(Variant::CnnLstm)
    };
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        learning_rate: 3e-3,
        val_split: 0.0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&model, data, &cfg, None).unwrap();
    let first = out.report.epochs[0].train_loss;
    let last = out.report.epochs.last().unwrap().train_loss;
    eprintln!("loss {first:.5} -> {last:.5} in {:.1?}", t0.elapsed());
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let data = windows(TrajectoryKind::SaccadeMix, 3.2, 7);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = CheckpointSink { dir: a.path().into() };
    let sb = CheckpointSink { dir: b.path().into() };
    let ra = train(&small_model(), &data, &quick(3), Some(&sa)).unwrap();
    let rb = train(&small_model(), &data, &quick(3), Some(&sb)).unwrap();
    let fa = std::fs::read(sa.final_path()).unwrap();
    assert_eq!(fa, std::fs::read(sb.final_path()).unwrap());
    assert_eq!(std::fs::read(sa.epoch_path(2)).unwrap(), std::fs::read(sb.epoch_path(2)).unwrap());
    assert_eq!(ra.report.to_csv_without_time(), rb.report.to_csv_without_time());
    let other = train(&small_model(), &data, &TrainConfig { seed: 43, ..quick(3) }, None).unwrap();
    assert_ne!(other.checkpoint.to_bytes(), fa);
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let data = windows(TrajectoryKind::Fixation, 1.2, 2);
    let out = train(&small_model(), &data, &quick(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.evtk");
    save_checkpoint(&p, &out.checkpoint).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.store, out.checkpoint.store);
    assert_eq!(back.model.bn, out.checkpoint.model.bn);
    let state = back.train_state.as_ref().unwrap();
    assert_eq!(state.adam, out.checkpoint.train_state.as_ref().unwrap().adam);
    assert!(state.adam.step > 0);

    let bytes = std::fs::read(&p).unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    assert!(matches!(load_checkpoint(dir.path().join("missing.evtk")), Err(Error::Io { .. })));
}

#[test]
fn resume_at_five_matches_ten_straight() {
    let data = windows(TrajectoryKind::SmoothPursuit, 2.6, 3);
    let straight = train(&small_model(), &data, &quick(10), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink { dir: dir.path().into() };
    train(&small_model(), &data, &quick(5), Some(&sink)).unwrap();
    let half = load_checkpoint(sink.final_path()).unwrap();
    let resumed = resume(half, &data, &quick(10), None).unwrap();
    assert_eq!(resumed.report.epochs.len(), 10);
    assert_eq!(
        resumed.report.epochs.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
    assert_eq!(resumed.checkpoint.store, straight.checkpoint.store);
    assert_eq!(resumed.report.to_csv_without_time(), straight.report.to_csv_without_time());
}

fn batch_loss(model: &Model, store: &ParameterStore, batch: &[&SampleWindow], w: [f64; 2]) -> (f64, ParameterStore) {
    let (frames, len, b) = batch_frames(batch).unwrap();
    let mut targets = Vec::new();
    for l in 0..len {
        for win in batch {
            targets.extend_from_slice(&win.targets[l]);
        }
    }
    let mut m = model.clone();
    let mut store = store.clone();
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &store, &frames, len, b, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let loss = weighted_mse(&mut tape, out.coords, &targets, w, None).unwrap();
    let v = tape.value(loss)[0];
    store.zero_grads();
    tape.backward_into(loss, &mut store).unwrap();
    (v, store)
}

#[test]
fn weight_scaling_is_homogeneous() {
    let data = windows(TrajectoryKind::Fixation, 1.2, 4);
    let (model, store) = build_model(&ModelConfig { dropout: 0.0, ..small_model() }).unwrap();
    let batch: Vec<&SampleWindow> = data.iter().take(2).collect();
    let (base, g1) = batch_loss(&model, &store, &batch, [1.0, 2.0]);
    let (scaled, g3) = batch_loss(&model, &store, &batch, [3.0, 6.0]);
    assert!((scaled - 3.0 * base).abs() <= 1e-12 * scaled.abs());
    let (mut s1, mut s3) = (g1.clone(), g3.clone());
    adam_step(&mut s1, &mut AdamState::default(), 1e-3).unwrap();
    adam_step(&mut s3, &mut AdamState::default(), 1e-3).unwrap();
    for ((name, a), (_, b)) in s1.iter().zip(s3.iter()) {
        let before = store.get(name).unwrap().data();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(before) {
            assert_eq!((x - z).signum(), (y - z).signum(), "{name}");
        }
    }
}

#[test]
fn small_step_loss_change_is_linear_in_lr() {
    let data = windows(TrajectoryKind::Fixation, 1.2, 5);
    let (model, store) = build_model(&ModelConfig { dropout: 0.0, ..small_model() }).unwrap();
    let batch: Vec<&SampleWindow> = data.iter().take(2).collect();
    let (before, _) = batch_loss(&model, &store, &batch, [1.0, 1.0]);
    let delta = |lr: f64| {
        let mut m = model.clone();
        let mut s = store.clone();
        let cfg = TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        };
        train_step(&mut m, &mut s, &mut AdamState::default(), &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        batch_loss(&model, &s, &batch, [1.0, 1.0]).0 - before
    };
    let (big, small) = (delta(1e-5), delta(1e-6));
    assert!(big < 0.0 && small < 0.0);
    let ratio = big / small;
    assert!((ratio - 10.0).abs() <= 2.0, "ratio {ratio}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = windows(TrajectoryKind::Fixation, 1.2, 6);
    for cfg in [
        TrainConfig { batch_size: 1, ..quick(1) },
        TrainConfig { learning_rate: 0.0, ..quick(1) },
        TrainConfig { epochs: 0, ..quick(1) },
        TrainConfig { loss_weights: [0.0, 0.0], ..quick(1) },
        TrainConfig { val_split: 0.6, ..quick(1) },
    ] {
        assert!(train(&small_model(), &data, &cfg, None).unwrap_err().is_config());
    }
    assert!(matches!(train(&small_model(), &[], &quick(1), None), Err(Error::Contract(_))));
}
