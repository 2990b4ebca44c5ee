//! Turns defaults, an optional config file, `EVTRACK_SEED` and command-line
//! flags into one key map, and writes it back out as a run manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory};
use evtrack_core::config::KvMap;
use evtrack_core::Error;
use serde_json::Value;

use crate::args::Cli;

pub const SEED_ENV: &str = "EVTRACK_SEED";

/// Manifest keys that are not flags.
const META_KEYS: [&str; 2] = ["subcommand", "version"];

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or arguments: exit 2.
    Usage(String),
    /// Missing files, corrupt data, numerical failures: exit 1.
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("i/o error on {}: {e}", path.display()))
}

/// Resolved settings for one subcommand run.
#[derive(Debug, Clone)]
pub struct Settings {
    pub subcommand: String,
    pub kv: KvMap,
}

impl Settings {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.kv.get(key)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Outcome<PathBuf> {
        self.path(key)
            .ok_or_else(|| Failure::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Outcome<T> {
        match self.kv.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Failure::Usage(format!("invalid value '{v}' for {key}"))),
        }
    }

    pub fn flag(&self, key: &str) -> Outcome<bool> {
        self.parsed(key, false)
    }
}

/// Every flag id of a subcommand except `--config`.
fn flag_ids(name: &str) -> Vec<String> {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    sub.get_arguments()
        .map(|a| a.get_id().as_str().to_string())
        .filter(|id| id != "config" && id != "help" && id != "version")
        .collect()
}

/// Config file, then `EVTRACK_SEED` when no seed was given elsewhere, then
/// flags typed on the command line. Defaults are left to the core parsers.
pub fn resolve(name: &str, m: &ArgMatches) -> Outcome<Settings> {
    let ids = flag_ids(name);
    let mut kv = KvMap::new();
    let mut seed_given = false;

    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let file = KvMap::parse(&text)?;
        let mut known: Vec<&str> = ids.iter().map(String::as_str).collect();
        known.extend(META_KEYS);
        file.reject_unknown(&known)?;
        if let Some(s) = file.get("subcommand") {
            if s != name {
                return usage(format!(
                    "{} is a manifest for '{s}', not '{name}'",
                    path.display()
                ));
            }
        }
        for (k, v) in file.iter() {
            if !META_KEYS.contains(&k) {
                kv.set(k, v);
            }
        }
        seed_given = file.contains("seed");
    }

    for id in &ids {
        if m.value_source(id) != Some(ValueSource::CommandLine) {
            continue;
        }
        let raw: Vec<String> = m
            .get_raw(id)
            .into_iter()
            .flatten()
            .map(|s| s.to_string_lossy().into_owned())
            .collect();
        // bare switches have no raw value
        let value = if raw.is_empty() {
            "true".to_string()
        } else {
            raw.join(",")
        };
        kv.set(id, value);
        if id == "seed" {
            seed_given = true;
        }
    }

    if !seed_given && ids.iter().any(|i| i == "seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            if s.trim().parse::<u64>().is_err() {
                return usage(format!("{SEED_ENV}='{s}' is not an unsigned integer"));
            }
            kv.set("seed", s.trim());
        }
    }

    Ok(Settings {
        subcommand: name.to_string(),
        kv,
    })
}

/// `key = value` manifest: the fully materialized settings plus the
/// subcommand and crate version. Feeding it back through `--config`
/// reproduces the run.
pub fn write_manifest(dir: &Path, settings: &Settings, resolved: &KvMap) -> Outcome<()> {
    let mut m = KvMap::new();
    m.set("subcommand", &settings.subcommand);
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.merge(&settings.kv);
    let ids = flag_ids(&settings.subcommand);
    for (k, v) in resolved.iter() {
        if ids.iter().any(|i| i == k) {
            m.set(k, v);
        }
    }
    write_file(&dir.join("manifest.cfg"), m.to_text().as_bytes())
}

pub fn write_json(path: &Path, value: &Value) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Outcome<()> {
    std::fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

pub fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

/// JSON number, or null for NaN and infinities.
pub fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}
