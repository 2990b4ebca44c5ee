use evtrack_core::config::{join_list, parse_list, KvMap};
use evtrack_core::metrics::{evaluate, EvalOptions, PixelSpace, DEFAULT_TOLERANCES};
use evtrack_core::training::load_checkpoint;
use serde_json::json;

use super::{check_frames, data_config};
use crate::dataset::load_windows;
use crate::settings::{create_dir, num, write_file, write_json, write_manifest, Outcome, Settings};

pub fn run(s: &Settings) -> Outcome<()> {
    let ckpt_path = s.require_path("checkpoint")?;
    let data = s.require_path("data")?;
    let (dcfg, rate) = data_config(s)?;
    let tolerances: Vec<f64> = match s.get("tolerances") {
        Some(v) => parse_list("tolerances", v)?,
        None => DEFAULT_TOLERANCES.to_vec(),
    };
    let pixel_space: PixelSpace = s.get("pixel_space").unwrap_or("downsampled").parse()?;
    let opts = EvalOptions {
        tolerances,
        pixel_space,
        spatial_factor: dcfg.spatial_factor,
        exclude_closed: s.flag("exclude_closed")?,
        ..EvalOptions::default()
    };

    let ckpt = load_checkpoint(&ckpt_path)?;
    let windows = load_windows(&data, &dcfg, rate)?;
    check_frames(&ckpt.model, &windows)?;
    let report = evaluate(&ckpt.model, &ckpt.store, &windows, &opts)?;
    {
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), "{}", report.to_table());
    }

    if let Some(out) = s.path("out") {
        create_dir(&out)?;
        write_file(&out.join("eval.csv"), report.to_csv().as_bytes())?;
        let p_acc: Vec<_> = report
            .p_acc
            .iter()
            .map(|(t, p)| json!({ "tolerance": num(*t), "p_acc": num(*p) }))
            .collect();
        write_json(
            &out.join("eval.json"),
            &json!({
                "pixel_space": report.pixel_space.name(),
                "samples": report.n_samples,
                "windows": windows.len(),
                "p_acc": p_acc,
                "total_euclidean": num(report.total_euclidean),
                "mean_euclidean": num(report.mean_euclidean),
            }),
        )?;
        let mut resolved: KvMap = dcfg.to_kv();
        resolved.set("label_rate_hz", rate);
        resolved.set("tolerances", join_list(&opts.tolerances));
        resolved.set("pixel_space", pixel_space.name());
        resolved.set("exclude_closed", opts.exclude_closed);
        write_manifest(&out, s, &resolved)?;
    }
    Ok(())
}
