use evtrack_core::config::{join_list, KvMap};
use evtrack_core::events::FRAME_CHANNELS;
use evtrack_core::metrics::DEFAULT_TOLERANCES;
use evtrack_core::models::{ModelConfig, MODEL_KEYS};
use evtrack_core::training::{
    load_checkpoint, resume, train, CheckpointSink, TrainConfig, TrainOutcome,
};
use serde_json::json;

use super::{check_frames, data_config};
use crate::dataset::load_windows;
use crate::settings::{
    create_dir, num, usage, write_file, write_json, write_manifest, Outcome, Settings,
};

pub fn run(s: &Settings) -> Outcome<()> {
    let data = s.require_path("data")?;
    let out = s.require_path("out")?;
    let (dcfg, rate) = data_config(s)?;
    let tcfg = TrainConfig::from_kv(&s.kv)?;
    tcfg.validate()?;
    let windows = load_windows(&data, &dcfg, rate)?;
    create_dir(&out)?;
    let sink = CheckpointSink { dir: out.clone() };

    let outcome: TrainOutcome = match s.path("resume") {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            // model flags may restate the checkpoint but not change it
            let mut kv = ckpt.model.cfg.to_kv();
            for k in MODEL_KEYS.iter().filter(|k| **k != "seed") {
                if let Some(v) = s.get(k) {
                    kv.set(k, v);
                }
            }
            if ModelConfig::from_kv(&kv)? != ckpt.model.cfg {
                return usage("model settings differ from the checkpoint being resumed");
            }
            check_frames(&ckpt.model, &windows)?;
            resume(ckpt, &windows, &tcfg, Some(&sink))?
        }
        None => {
            let mut kv = s.kv.clone();
            kv.set("in_channels", FRAME_CHANNELS);
            kv.set("height", windows[0].height);
            kv.set("width", windows[0].width);
            kv.set("seed", tcfg.seed);
            let mcfg = ModelConfig::from_kv(&kv)?;
            train(&mcfg, &windows, &tcfg, Some(&sink))?
        }
    };

    let report = &outcome.report;
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    for r in &report.epochs {
        say!(
            "epoch {:>4}  train {:.6}  val {:.6}  p_acc@5/10/15 {:.3}/{:.3}/{:.3}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.p_acc[0],
            r.p_acc[1],
            r.p_acc[2]
        );
    }

    let model = &outcome.checkpoint.model;
    let mut resolved = KvMap::new();
    resolved.merge(&model.cfg.to_kv());
    resolved.merge(&tcfg.to_kv());
    resolved.merge(&dcfg.to_kv());
    resolved.set("label_rate_hz", rate);
    resolved.set("tolerances", join_list(&DEFAULT_TOLERANCES));
    write_manifest(&out, s, &resolved)?;

    let last = report.epochs.last();
    write_json(
        &out.join("summary.json"),
        &json!({
            "model": model.cfg.variant.name(),
            "parameters": outcome.checkpoint.store.num_scalars(),
            "windows": windows.len(),
            "epochs": report.epochs.len(),
            "final_train_loss": last.map_or(serde_json::Value::Null, |r| num(r.train_loss)),
            "final_val_loss": last.map_or(serde_json::Value::Null, |r| num(r.val_loss)),
            "final_p_acc": last.map_or(serde_json::Value::Null, |r| json!({
                "5": num(r.p_acc[0]),
                "10": num(r.p_acc[1]),
                "15": num(r.p_acc[2]),
            })),
            "checkpoint": "model.evtk",
        }),
    )
}
