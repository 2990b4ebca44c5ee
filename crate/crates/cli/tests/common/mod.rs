#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const BIN: &str = env!("CARGO_BIN_EXE_evtrack");

pub fn evtrack(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("EVTRACK_SEED")
        .output()
        .expect("binary runs")
}

pub fn evtrack_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("EVTRACK_SEED")
        .env(key, value)
        .output()
        .expect("binary runs")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("manifest.cfg")).expect("manifest written");
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Small model flags that keep CLI runs to a second or two.
pub const TINY: [&str; 14] = [
    "--conv-channels",
    "4,8,8",
    "--hidden",
    "12",
    "--feature-dim",
    "12",
    "--seq-len",
    "10",
    "--stride",
    "10",
    "--batch-size",
    "4",
    "--val-split",
    "0.2",
];

pub struct Shared {
    pub root: PathBuf,
    /// One 6 s smooth-pursuit recording.
    pub data: PathBuf,
    /// Two-epoch checkpoint trained on `data` with [`TINY`].
    pub checkpoint: PathBuf,
}

/// Data and a checkpoint built once per test binary.
pub fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
            .join(format!("cli-shared-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let data = root.join("data");
        ok(&evtrack(&[
            "synth",
            "--kind",
            "smooth_pursuit",
            "--seconds",
            "6",
            "--seed",
            "5",
            "--out",
            s(&data),
        ]));
        let run = root.join("run");
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--epochs",
            "2",
        ];
        args.extend(TINY);
        ok(&evtrack(&args));
        Shared {
            checkpoint: run.join("model.evtk"),
            root,
            data,
        }
    })
}
