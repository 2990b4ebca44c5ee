//! Recording discovery. A session directory holds `events.evt` and
//! `labels.csv`; a dataset directory holds session subdirectories.

use std::path::{Path, PathBuf};

use evtrack_core::events::{load_events, load_labels, prepare_windows, DataConfig, SampleWindow};
use evtrack_core::events::{EventStream, LabelTrack};

use crate::settings::{io_failure, Failure, Outcome};

pub const EVENTS_FILE: &str = "events.evt";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone)]
pub struct Session {
    pub name: String,
    pub dir: PathBuf,
}

fn is_session(dir: &Path) -> bool {
    dir.join(EVENTS_FILE).is_file()
}

/// Sessions under `root`, sorted by name. `root` itself counts when it
/// contains an event file.
pub fn discover(root: &Path) -> Outcome<Vec<Session>> {
    if !root.is_dir() {
        return Err(Failure::Runtime(format!(
            "data directory {} does not exist",
            root.display()
        )));
    }
    if is_session(root) {
        let name = root.file_name().map_or_else(
            || "session".to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        return Ok(vec![Session {
            name,
            dir: root.to_path_buf(),
        }]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_failure(root, e))? {
        let entry = entry.map_err(|e| io_failure(root, e))?;
        let p = entry.path();
        if p.is_dir() && is_session(&p) {
            found.push(Session {
                name: entry.file_name().to_string_lossy().into_owned(),
                dir: p,
            });
        }
    }
    if found.is_empty() {
        return Err(Failure::Runtime(format!(
            "no recordings in {}: expected {EVENTS_FILE} and {LABELS_FILE}, or subdirectories holding them",
            root.display()
        )));
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(found)
}

impl Session {
    pub fn load(&self, label_rate_hz: f64) -> Outcome<(EventStream, LabelTrack)> {
        let events = load_events(self.dir.join(EVENTS_FILE))?;
        let labels = load_labels(self.dir.join(LABELS_FILE), label_rate_hz)?;
        Ok((events, labels))
    }
}

/// Windows from every session, concatenated in session order.
pub fn load_windows(
    root: &Path,
    cfg: &DataConfig,
    label_rate_hz: f64,
) -> Outcome<Vec<SampleWindow>> {
    let mut all = Vec::new();
    for s in discover(root)? {
        let (events, labels) = s.load(label_rate_hz)?;
        all.extend(prepare_windows(&events, &labels, cfg)?);
    }
    if all.is_empty() {
        return Err(Failure::Runtime(format!(
            "{} yields no windows of {} frames",
            root.display(),
            cfg.seq_len
        )));
    }
    Ok(all)
}
