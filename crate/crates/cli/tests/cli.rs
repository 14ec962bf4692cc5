use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn levicool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levicool"))
        .args(args)
        .env("LEVICOOL_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SHORT: &str = r#"
[run]
duration_s = 8.0
settle_s = 0.5
seed = 9
[camera.in_loop]
estimators = ["centroid"]
[camera.out_of_loop]
estimators = ["centroid", "peak"]
"#;

#[test]
fn shipped_configs_validate() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let out = levicool(&["validate", s(&path)]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let out = levicool(&["simulate", "x.toml", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(levicool(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(levicool(&["sweep", "x.toml", "--axis", "colour"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "[trap]\nomega_hz = 23.5\n");
    let out = levicool(&["validate", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("omega_hz"));
    assert_eq!(levicool(&["validate", s(&dir.path().join("missing.toml"))]).status.code(), Some(1));
    assert_eq!(levicool(&["analyze", s(&dir.path().join("nothing"))]).status.code(), Some(1));
    assert_eq!(levicool(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_is_byte_reproducible_and_analyzable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.toml", SHORT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = levicool(&["simulate", &cfg, "--out", s(d)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for expected in ["config.toml", "metadata.json", "true_trace.csv", "in_loop.csv", "out_of_loop.csv", "out_of_loop_peak.csv"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let head = fs::read_to_string(a.join("out_of_loop.csv")).unwrap();
    assert!(head.starts_with("t_s,z_est_m,x_est_m,estimator,quality\n"));

    let out = levicool(&["analyze", s(&a)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(a.join("psd.csv").exists() && a.join("analysis.json").exists());

    // a different seed changes the trace
    let c = dir.path().join("c");
    levicool(&["simulate", &cfg, "--out", s(&c), "--seed", "10"]);
    assert_ne!(fs::read(a.join("true_trace.csv")).unwrap(), fs::read(c.join("true_trace.csv")).unwrap());
}

#[test]
fn losing_the_particle_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // anti-damping loop phase
    let cfg = write_config(
        dir.path(),
        "heat.toml",
        "[run]\nduration_s = 30.0\n[camera.in_loop]\nestimators = [\"centroid\"]\n[feedback]\ndelay_phase_deg = 290.0\n",
    );
    let run = dir.path().join("run");
    let out = levicool(&["simulate", &cfg, "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let meta = fs::read_to_string(run.join("metadata.json")).unwrap();
    assert!(meta.contains("\"lost\": {"));
}

#[test]
fn pressure_sweep_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        r#"
[run]
duration_s = 60.0
seed = 4
[camera.in_loop]
estimators = ["centroid"]
[camera.out_of_loop]
estimators = ["centroid"]
[sweep]
pressure_mbar = { start = 1e-1, stop = 1.0, points = 2 }
seeds_per_point = 2
compare_feedback_off = true
[output]
telemetry = false
"#,
    );
    let out_dir = dir.path().join("sweep");
    let out = levicool(&["sweep", &cfg, "--axis", "pressure", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = levicool(&["analyze", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let off = text.split("[feedback-off]").nth(1).expect("feedback-off table");
    let temps: Vec<f64> = off
        .lines()
        .skip(2)
        .take(2)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    for t in temps {
        assert!((t / 300.0 - 1.0).abs() < 0.15, "{t} K\n{text}");
    }
}

#[test]
fn offline_tools_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = levicool(&["bench-estimators", "--frames", "100", "--repeats", "1", "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("gaussian_fit"));

    let out = levicool(&["calibrate-pixels", "--frames", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let rel: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("relative error: "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(rel.abs() < 0.005, "{text}");
}
