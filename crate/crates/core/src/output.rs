//! CSV and JSON artifacts.
//!
//! Every CSV starts with a provenance comment line followed by a header row.
//! Floats are written in Rust's shortest round-trip form, so reruns produce
//! identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub model: String,
}

impl Provenance {
    pub fn comment_line(&self) -> String {
        format!("# config_sha256={} seed={} version={} model={}", self.config_sha256, self.seed, self.version, self.model)
    }
}

pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, provenance: &Provenance, header: &[String]) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", provenance.comment_line())?;
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len(), path: path.to_path_buf() })
    }

    pub fn row(&mut self, cells: &[String]) -> std::io::Result<()> {
        debug_assert_eq!(cells.len(), self.columns, "row width in {}", self.path.display());
        writeln!(self.out, "{}", cells.join(","))
    }

    pub fn finish(mut self) -> std::io::Result<PathBuf> {
        self.out.flush()?;
        Ok(self.path)
    }
}

/// Column names `prefix1..prefixN`.
pub fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|k| format!("{prefix}{k}")).collect()
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Time labels for file names, e.g. `0.05` -> `t0.05`.
pub fn time_label(t: f64) -> String {
    format!("t{t}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance { config_sha256: "ab".into(), seed: 4, version: "0.1.0".into(), model: "m".into() };
        let path = dir.path().join("x.csv");
        let mut w = CsvWriter::create(&path, &prov, &["k".into(), "x1".into()]).unwrap();
        w.row(&["0".into(), num(0.1)]).unwrap();
        w.row(&["1".into(), num(1e-20)]).unwrap();
        w.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# config_sha256=ab seed=4 version=0.1.0 model=m\nk,x1\n0,0.1\n1,1e-20\n");
    }

    #[test]
    fn labels() {
        assert_eq!(numbered("x", 2), vec!["x1", "x2"]);
        assert_eq!(time_label(0.05), "t0.05");
        assert_eq!(time_label(40.0), "t40");
    }
}
