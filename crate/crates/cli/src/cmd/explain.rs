use evtrack_core::config::parse_list;
use evtrack_core::lrp::{
    explain, export_heatmap, ExplainTarget, HeatmapFormat, RelevanceMap, Rule, RuleConfig,
    TargetOutput, DEFAULT_EPSILON, DEFAULT_GAMMA, LAYER_CLASSES,
};
use evtrack_core::training::load_checkpoint;
use serde_json::{json, Value};

use super::{check_frames, data_config};
use crate::dataset::load_windows;
use crate::settings::{create_dir, num, usage, write_json, write_manifest, Outcome, Settings};

/// `class=rule` pairs, comma separated.
fn apply_overrides(rules: &mut RuleConfig, spec: &str) -> Outcome<()> {
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((class, rule)) = part.split_once('=') else {
            return usage(format!("layer rule '{part}' is not class=rule"));
        };
        if !LAYER_CLASSES.contains(&class.trim()) {
            return usage(format!(
                "unknown layer class '{}'; expected one of {}",
                class.trim(),
                LAYER_CLASSES.join(", ")
            ));
        }
        let rule: Rule = rule.trim().parse()?;
        rules.set(class.trim(), rule)?;
    }
    Ok(())
}

fn map_summary(map: &RelevanceMap, frames: &[usize], files: &[String]) -> Value {
    let per_frame: Vec<_> = frames
        .iter()
        .map(|&f| json!({ "frame": f, "relevance": num(map.frame(f).iter().sum()) }))
        .collect();
    let trace: Vec<_> = map
        .trace
        .iter()
        .map(|t| json!({ "layer": t.layer, "r_out": num(t.r_out), "r_in": num(t.r_in) }))
        .collect();
    json!({
        "step": map.step,
        "target": map.target.name(),
        "seeded": num(map.seeded()),
        "total": num(map.total()),
        "conservation_gap": num((map.total() - map.seeded()).abs()),
        "frames": per_frame,
        "files": files,
        "trace": trace,
    })
}

pub fn run(s: &Settings) -> Outcome<()> {
    let ckpt_path = s.require_path("checkpoint")?;
    let data = s.require_path("data")?;
    let out = s.require_path("out")?;
    let (dcfg, rate) = data_config(s)?;

    let eps: f64 = s.parsed("epsilon", DEFAULT_EPSILON)?;
    let gamma: f64 = s.parsed("gamma", DEFAULT_GAMMA)?;
    let preset = s.get("rule").unwrap_or("composite");
    let mut rules = RuleConfig::preset(preset, eps, gamma)?;
    if let Some(spec) = s.get("layer_rules") {
        apply_overrides(&mut rules, spec)?;
    }
    rules.validate()?;
    let output: TargetOutput = s.get("target").unwrap_or("x").parse()?;
    let seed_scale: f64 = s.parsed("seed_scale", 1.0)?;
    if !seed_scale.is_finite() {
        return usage("seed_scale must be finite");
    }
    let formats: Vec<HeatmapFormat> = parse_list("format", s.get("format").unwrap_or("pgm,csv"))?;
    let frames: Vec<usize> = parse_list("frame", s.get("frame").unwrap_or("0"))?;
    let index: usize = s.parsed("window", 0)?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let windows = load_windows(&data, &dcfg, rate)?;
    check_frames(&ckpt.model, &windows)?;
    let Some(window) = windows.get(index) else {
        return usage(format!(
            "window {index} out of range: the data has {} windows",
            windows.len()
        ));
    };
    for &f in &frames {
        if f >= window.len {
            return usage(format!(
                "frame {f} out of range: windows have {} frames",
                window.len
            ));
        }
    }
    let step: Option<usize> = match s.get("step") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| crate::settings::Failure::Usage(format!("invalid step '{v}'")))?,
        ),
        None => None,
    };

    // one relevance map per explained step
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    match step {
        Some(t) => jobs.push((t, frames.clone())),
        None => {
            for &f in &frames {
                match jobs.iter_mut().find(|(t, _)| *t == f) {
                    Some((_, fs)) => fs.push(f),
                    None => jobs.push((f, vec![f])),
                }
            }
        }
    }

    create_dir(&out)?;
    let mut maps = Vec::new();
    for (t, fs) in &jobs {
        let mut target = ExplainTarget::new(output, *t);
        target.seed_scale = seed_scale;
        let map = explain(&ckpt.model, &ckpt.store, window, target, &rules)?;
        let mut files = Vec::new();
        for &f in fs {
            for fmt in &formats {
                let name = format!(
                    "relevance_w{index:04}_s{t:03}_f{f:03}_{}.{}",
                    output.name(),
                    fmt.extension()
                );
                export_heatmap(&map, f, &out.join(&name), *fmt)?;
                files.push(name);
            }
        }
        say!(
            "step {t}: seeded {:.6e}, input relevance {:.6e}, {} files",
            map.seeded(),
            map.total(),
            files.len()
        );
        maps.push(map_summary(&map, fs, &files));
    }

    write_json(
        &out.join("explain.json"),
        &json!({
            "window": index,
            "rules": rules.describe(),
            "seed_scale": num(seed_scale),
            "maps": maps,
        }),
    )?;
    let mut resolved = dcfg.to_kv();
    resolved.set("label_rate_hz", rate);
    resolved.set("epsilon", eps);
    resolved.set("gamma", gamma);
    resolved.set("rule", preset);
    resolved.set("target", output.name());
    resolved.set("seed_scale", seed_scale);
    resolved.set("window", index);
    write_manifest(&out, s, &resolved)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_one_class() {
        let mut r = RuleConfig::composite(1e-6, 0.25);
        apply_overrides(&mut r, "head=lrp0, conv=epsilon:1e-9").unwrap();
        assert_eq!(r.head, Rule::LRP0);
        assert_eq!(r.conv, Rule::epsilon(1e-9));
        assert!(apply_overrides(&mut r, "head").is_err());
        assert!(apply_overrides(&mut r, "lstm=lrp0").is_err());
    }
}
