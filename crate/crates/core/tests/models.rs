use evtrack_core::autodiff::{Mode, ParameterStore, Tape};
use evtrack_core::gradcheck::reduced_config;
use evtrack_core::models::{build_model, Model, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..2.0)).collect()
}

/// Random running statistics so eval-mode batch norm is not an identity.
fn with_stats(mut m: Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &mut m.bn {
        s.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        s.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    m
}

#[test]
fn same_seed_identical_parameters() {
    let cfg = ModelConfig::new(Variant::CnnGru);
    let (_, a) = build_model(&cfg).unwrap();
    let (_, b) = build_model(&cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_frames_eval_is_repeatable_and_bounded() {
    for v in Variant::ALL {
        let (m, s) = build_model(&reduced_config(v)).unwrap();
        let z = vec![0.0; 4 * m.frame_size()];
        let a = m.predict(&s, &z, 4, 1).unwrap();
        assert_eq!(a, m.predict(&s, &z, 4, 1).unwrap());
        assert!(a.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn eval_output_independent_of_batch_composition() {
    for v in Variant::ALL {
        let (m, s) = build_model(&reduced_config(v)).unwrap();
        let m = with_stats(m, 1);
        let fs = m.frame_size();
        let (len, batch) = (4, 3);
        let x = frames(2, len * batch * fs);
        let all = m.predict(&s, &x, len, batch).unwrap();
        for b in 0..batch {
            let single: Vec<f64> = (0..len).flat_map(|l| x[(l * batch + b) * fs..(l * batch + b + 1) * fs].to_vec()).collect();
            let alone = m.predict(&s, &single, len, 1).unwrap();
            for l in 0..len {
                for c in 0..2 {
                    assert!((alone[l][c] - all[l * batch + b][c]).abs() <= 1e-12);
                }
            }
        }
    }
}

fn perturb_last_frame(m: &Model, s: &ParameterStore, len: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let fs = m.frame_size();
    let x = frames(3, len * fs);
    let mut y = x.clone();
    y[(len - 1) * fs..].iter_mut().for_each(|v| *v += 1.5);
    (m.predict(s, &x, len, 1).unwrap(), m.predict(s, &y, len, 1).unwrap())
}

#[test]
fn unidirectional_variants_are_causal() {
    for v in [Variant::CnnGru, Variant::CnnLstm] {
        let (m, s) = build_model(&reduced_config(v)).unwrap();
        let m = with_stats(m, 4);
        let (a, b) = perturb_last_frame(&m, &s, 5);
        for t in 0..4 {
            assert!((a[t][0] - b[t][0]).abs() <= 1e-12 && (a[t][1] - b[t][1]).abs() <= 1e-12, "{v} step {t}");
        }
        assert_ne!(a[4], b[4]);
    }
}

#[test]
fn bilstm_step_zero_sees_the_future() {
    let (m, s) = build_model(&reduced_config(Variant::CnnBilstm)).unwrap();
    let m = with_stats(m, 5);
    let (a, b) = perturb_last_frame(&m, &s, 5);
    assert!((a[0][0] - b[0][0]).abs() + (a[0][1] - b[0][1]).abs() > 1e-9);
}

#[test]
fn encoder_weights_receive_gradient_from_every_step() {
    let (mut m, s) = build_model(&reduced_config(Variant::CnnLstm)).unwrap();
    let len = 4;
    let x = frames(6, len * 2 * m.frame_size());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Tape::new();
    let out = m.forward(&mut t, &s, &x, len, 2, Mode::Train, &mut rng).unwrap();
    let w = t.param(&s, "enc.conv0.w").unwrap();
    for step in 0..len {
        // loss on one step only; causal model, so only frames ≤ step contribute
        let mut proj = vec![0.0; len * 2 * 2];
        proj[step * 4..step * 4 + 4].copy_from_slice(&[1.0, -0.5, 0.25, 0.75]);
        let loss = t.dot_const(out.coords, &proj).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(w).unwrap().iter().any(|g| g.abs() > 0.0), "step {step}");
    }
}

#[test]
fn train_mode_updates_running_stats_and_eval_does_not() {
    let (mut m, s) = build_model(&reduced_config(Variant::CnnGru)).unwrap();
    let before = m.bn.clone();
    let x = frames(7, 2 * 2 * m.frame_size());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    m.forward(&mut Tape::new(), &s, &x, 2, 2, Mode::Eval, &mut rng).unwrap();
    assert_eq!(m.bn, before);
    m.forward(&mut Tape::new(), &s, &x, 2, 2, Mode::Train, &mut rng).unwrap();
    assert_ne!(m.bn, before);
}

// Plain-loop oracle for the L = 1 cnn_lstm composition.
mod oracle {
    use super::*;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn param<'a>(s: &'a ParameterStore, n: &str) -> &'a [f64] {
        s.get(n).unwrap().data()
    }

    fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let cols = x.len();
        (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
    }

    pub fn forward(m: &Model, s: &ParameterStore, x: &[f64]) -> [f64; 2] {
        let cfg = &m.cfg;
        let (mut c, mut h, mut w) = (cfg.in_channels, cfg.height, cfg.width);
        let mut a = x.to_vec();
        let k = cfg.kernel as isize;
        let pad = k / 2;
        for (i, &co) in cfg.conv_channels.iter().enumerate() {
            let wt = param(s, &format!("enc.conv{i}.w"));
            let gamma = param(s, &format!("enc.bn{i}.gamma"));
            let beta = param(s, &format!("enc.bn{i}.beta"));
            let bn = &m.bn[i];
            let mut out = vec![0.0; co * h * w];
            for o in 0..co {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iy, ix) = (y + ky - pad, xx + kx - pad);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c + ci) * k as usize + ky as usize) * k as usize + kx as usize]
                                        * a[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let n = (acc - bn.running_mean[o]) / (bn.running_var[o] + bn.eps).sqrt();
                        out[(o * h + y as usize) * w + xx as usize] = (gamma[o] * n + beta[o]).max(0.0);
                    }
                }
            }
            let (ph, pw) = (h / 2, w / 2);
            let mut pooled = vec![0.0; co * ph * pw];
            for o in 0..co {
                for y in 0..ph {
                    for xx in 0..pw {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += out[(o * h + 2 * y + dy) * w + 2 * xx + dx];
                            }
                        }
                        pooled[(o * ph + y) * pw + xx] = acc / 4.0;
                    }
                }
            }
            a = pooled;
            c = co;
            h = ph;
            w = pw;
        }
        let f: Vec<f64> = matvec(param(s, "enc.fc.w"), &a, cfg.feature_dim)
            .iter()
            .zip(param(s, "enc.fc.b"))
            .map(|(v, b)| v + b)
            .collect();
        let mut inp = f;
        for layer in 0..cfg.rnn_layers {
            let p = |g: &str| {
                let pre: Vec<f64> = matvec(param(s, &format!("rnn.l{layer}.fwd.w_{g}")), &inp, cfg.hidden)
                    .iter()
                    .zip(param(s, &format!("rnn.l{layer}.fwd.b_{g}")))
                    .map(|(v, b)| v + b)
                    .collect();
                pre // zero initial h: the U·h term vanishes
            };
            let (i, g, o) = (p("i"), p("g"), p("o"));
            inp = (0..cfg.hidden)
                .map(|j| {
                    let cc = sig(i[j]) * g[j].tanh();
                    sig(o[j]) * cc.tanh()
                })
                .collect();
        }
        let hw = param(s, "head.w");
        let hb = param(s, "head.b");
        let sc = matvec(hw, &inp, 2);
        [sig(sc[0] + hb[0]), sig(sc[1] + hb[1])]
    }
}

#[test]
fn single_step_lstm_matches_hand_composition() {
    let mut cfg = reduced_config(Variant::CnnLstm);
    cfg.height = 9;
    cfg.width = 12;
    let (m, s) = build_model(&cfg).unwrap();
    let m = with_stats(m, 8);
    let x = frames(9, m.frame_size());
    let got = m.predict(&s, &x, 1, 1).unwrap()[0];
    let want = oracle::forward(&m, &s, &x);
    assert!((got[0] - want[0]).abs() <= 1e-12 && (got[1] - want[1]).abs() <= 1e-12, "{got:?} vs {want:?}");
}
