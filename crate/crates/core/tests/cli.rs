mod common;

use common::{bin, configs_dir, snapshot_dir, write_config, SMALL};

const COMMANDS: [&str; 6] = ["check", "simulate", "invariant", "initial-independence", "coupling-decay", "wasserstein-order"];

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().unwrap()
}

#[test]
fn check_exit_codes_on_shipped_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let unstable = configs_dir().join("cubic_switching.toml");
    let o = run(&["check", "--config", unstable.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["switching"]["s1"], 4.0);
    assert_eq!(report["passes"], false);

    let stable = configs_dir().join("cubic_switching_stable.toml");
    let o = run(&["check", "--config", stable.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((report["switching"]["lambda1"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((report["switching"]["lambda2"].as_f64().unwrap() - 1.32).abs() < 1e-12);
    assert!(report["violations"].as_array().unwrap().is_empty());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_generator = write_config(dir.path(), "a.toml", &SMALL.replace("generator = [[-4.0, 4.0], [1.0, -1.0]]", ""));
    let o = run(&["simulate", "--config", no_generator.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generator"));

    let short_row = write_config(dir.path(), "b.toml", &SMALL.replace("[1.0, -1.0]]", "[1.0]]"));
    let o = run(&["simulate", "--config", short_row.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("chain.generator"));

    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unstable_step_needs_override() {
    let dir = tempfile::tempdir().unwrap();
    // max step is 1/6 for the declared constants
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("step = 0.01\nsteps = 200", "step = 0.2\nsteps = 20").replace("[0.05, 0.3, 1.0]", "[0.2, 1.0]"),
    );
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--allow-unstable-step"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--allow-unstable-step"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_steps_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.toml", &SMALL.replace("steps = 200", "steps = 0"));
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("trajectory_1.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1], "k,t,x1,regime");
    assert_eq!(lines[2], "0,0,0.5,2");
}

#[test]
fn every_csv_has_provenance_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.toml", SMALL);
    let out = dir.path().join("out");
    for cmd in COMMANDS {
        let o = run(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for (name, bytes) in snapshot_dir(&out) {
        if name.ends_with(".csv") {
            let text = String::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().starts_with("# config_sha256="), "{name}");
            let header = lines.next().unwrap();
            let width = header.split(',').count();
            assert!(lines.all(|l| l.split(',').count() == width), "{name}");
        }
    }
}

#[test]
fn outputs_are_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f.toml", SMALL);
    let mut runs = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = dir.path().join(tag);
        for cmd in COMMANDS {
            let o = run(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers]);
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        runs.push(snapshot_dir(&out));
    }
    assert!(runs[0].len() > 10);
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn seed_flag_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "12"]);
    assert_ne!(std::fs::read(a.join("trajectory_1.csv")).unwrap(), std::fs::read(b.join("trajectory_1.csv")).unwrap());
}
