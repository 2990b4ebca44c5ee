use std::time::Instant;

use evtrack_core::config::KvMap;
use evtrack_core::gradcheck::{model_suite, primitive_suite, PLAIN_STENCIL, SUITE_STENCIL};
use serde_json::json;

use crate::settings::{
    create_dir, num, usage, write_json, write_manifest, Failure, Outcome, Settings,
};

pub fn run(s: &Settings) -> Outcome<()> {
    let points: usize = s.parsed("points", 10)?;
    let seed: u64 = s.parsed("seed", 42)?;
    if points == 0 {
        return usage("points must be at least 1");
    }
    let stencil_name = s.get("stencil").unwrap_or("extrapolated");
    let stencil = match stencil_name {
        "extrapolated" => SUITE_STENCIL,
        "central" => PLAIN_STENCIL,
        other => return usage(format!("unknown stencil '{other}'")),
    };
    let t0 = Instant::now();
    let mut checks = primitive_suite(points, seed, stencil)?;
    checks.extend(model_suite(points, seed, stencil)?);
    let seconds = t0.elapsed().as_secs_f64();

    say!(
        "{:<28} {:>12} {:>10} {:>8} {:>8}  result",
        "check",
        "max rel err",
        "tolerance",
        "coords",
        "skipped"
    );
    for c in &checks {
        say!(
            "{:<28} {:>12.3e} {:>10.0e} {:>8} {:>8}  {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.checked,
            c.skipped,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    say!("{} checks, {failed} failed, {seconds:.1} s", checks.len());

    if let Some(out) = s.path("out") {
        create_dir(&out)?;
        let rows: Vec<_> = checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "max_rel_error": num(c.max_rel_error),
                    "tolerance": num(c.tolerance),
                    "points": c.points,
                    "checked": c.checked,
                    "skipped": c.skipped,
                    "passed": c.passed(),
                })
            })
            .collect();
        write_json(
            &out.join("gradcheck.json"),
            &json!({ "seed": seed, "points": points, "stencil": stencil_name, "checks": rows }),
        )?;
        let mut resolved = KvMap::new();
        resolved.set("points", points);
        resolved.set("seed", seed);
        resolved.set("stencil", stencil_name);
        write_manifest(&out, s, &resolved)?;
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} gradient checks exceed their tolerance"
        )));
    }
    Ok(())
}
