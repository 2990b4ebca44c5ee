use evtrack_core::config::KvMap;
use evtrack_core::events::{save_events, save_labels};
use evtrack_core::synth::{
    fixture_manifest, synthesize, synthetic_13, TrajectoryConfig, FIXTURE_NAME,
};
use serde_json::json;

use crate::dataset::{EVENTS_FILE, LABELS_FILE};
use crate::settings::{
    create_dir, num, usage, write_file, write_json, write_manifest, Outcome, Settings,
};

/// Per-recording keys that a fixture fixes for itself.
const TRAJECTORY_KEYS: [&str; 12] = [
    "kind",
    "seconds",
    "width",
    "height",
    "radius",
    "jitter_rms",
    "px_per_degree",
    "pursuit_speed_deg_s",
    "pursuit_amplitude",
    "saccade_speed_deg_s",
    "noise_rate_hz",
    "center_x",
];

pub fn run(s: &Settings) -> Outcome<()> {
    let out = s.require_path("out")?;
    let seed: u64 = s.parsed("seed", 42)?;

    if let Some(name) = s.get("fixture") {
        if name != FIXTURE_NAME {
            return usage(format!("unknown fixture '{name}'"));
        }
        if let Some(k) = TRAJECTORY_KEYS
            .iter()
            .chain(["center_y"].iter())
            .find(|k| s.kv.contains(k))
        {
            return usage(format!("'{k}' cannot be combined with a fixture"));
        }
        create_dir(&out)?;
        let sessions = synthetic_13(seed);
        let mut rows = Vec::new();
        for sess in &sessions {
            let dir = out.join(&sess.name);
            create_dir(&dir)?;
            let (events, labels) = synthesize(&sess.cfg)?;
            save_events(dir.join(EVENTS_FILE), &events)?;
            save_labels(dir.join(LABELS_FILE), &labels)?;
            say!(
                "{}  {:<14} {:>4.1} s  {:>8} events  {:>4} labels",
                sess.name,
                sess.cfg.kind.name(),
                sess.cfg.seconds,
                events.len(),
                labels.len()
            );
            rows.push(json!({
                "name": sess.name,
                "kind": sess.cfg.kind.name(),
                "seconds": num(sess.cfg.seconds),
                "seed": sess.cfg.seed,
                "events": events.len(),
                "labels": labels.len(),
            }));
        }
        write_file(
            &out.join("fixture.cfg"),
            fixture_manifest(&sessions).to_text().as_bytes(),
        )?;
        let mut resolved = KvMap::new();
        resolved.set("seed", seed);
        write_manifest(&out, s, &resolved)?;
        write_json(
            &out.join("summary.json"),
            &json!({ "fixture": name, "seed": seed, "sessions": rows }),
        )?;
        return Ok(());
    }

    let mut kv = s.kv.clone();
    if !kv.contains("kind") {
        kv.set("kind", "fixation");
    }
    kv.set("seed", seed);
    let cfg = TrajectoryConfig::from_kv(&kv)?;
    create_dir(&out)?;
    let (events, labels) = synthesize(&cfg)?;
    save_events(out.join(EVENTS_FILE), &events)?;
    save_labels(out.join(LABELS_FILE), &labels)?;
    say!(
        "{} {:.1} s on {}x{}: {} events, {} labels",
        cfg.kind.name(),
        cfg.seconds,
        cfg.width,
        cfg.height,
        events.len(),
        labels.len()
    );
    write_manifest(&out, s, &cfg.to_kv())?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "kind": cfg.kind.name(),
            "seconds": num(cfg.seconds),
            "width": cfg.width,
            "height": cfg.height,
            "seed": cfg.seed,
            "events": events.len(),
            "labels": labels.len(),
        }),
    )
}
