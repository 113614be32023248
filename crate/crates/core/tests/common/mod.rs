#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-bem"))
}

/// A small configuration of the stable cubic model that exercises every
/// command in well under a second.
pub const SMALL: &str = r#"
[model]
builtin = "two-regime-cubic"

[chain]
generator = [[-4.0, 4.0], [1.0, -1.0]]

[[initial]]
x = [0.5]
regime = 2

[[initial]]
x = [-3.0]
regime = 1

[[initial]]
x = [5.0]
regime = 2

[run]
step = 0.01
steps = 200
ensemble = 200
seed = 11
p = 0.5
snapshot_times = [0.05, 0.3, 1.0]

[check]
samples = 500

[invariant]
grid_step = 0.05
grid_points = 21

[independence]
time = 1.0
subsample = 64
resamples = 3

[order]
steps = [0.04, 0.02, 0.01]
reference_step = 0.0025
horizon = 1.0
"#;

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// All files below `dir` with their contents, sorted by relative path.
pub fn snapshot_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}
