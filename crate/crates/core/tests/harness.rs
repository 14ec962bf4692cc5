mod common;

use std::f64::consts::PI;

use num_complex::Complex64;

use levicool::feedback::Biquad;
use levicool::harness::artifacts::{analyze_artifacts, analyze_run_dir, read_trace_csv, write_run_dir};
use levicool::harness::engine::RunArtifacts;
use levicool::harness::sweep::{analyze_sweep_dir, run_sweep, Axis, Variant};
use levicool::harness::{run_closed_loop, ExperimentConfig};
use levicool::units::K_B;

use common::config_path;

fn from_toml(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn true_variance(art: &RunArtifacts, settle: f64) -> f64 {
    let z: Vec<f64> = art.true_trace.iter().filter(|p| p.t >= settle).map(|p| p.z).collect();
    variance(&z)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (
        a.iter().sum::<f64>() / a.len() as f64,
        b.iter().sum::<f64>() / b.len() as f64,
    );
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

const SHORT: &str = r#"
[run]
duration_s = 10.0
settle_s = 1.0
seed = 3
[camera.in_loop]
estimators = ["centroid"]
[camera.out_of_loop]
estimators = ["centroid", "gaussian_fit"]
"#;

#[test]
fn two_camera_run_has_the_rate_ratio_and_tracks_the_truth() {
    let cfg = from_toml(SHORT);
    let art = run_closed_loop(&cfg).unwrap();
    assert!(!art.lost());
    let ratio = art.out_of_loop[0].len() as f64 / art.in_loop.len() as f64;
    assert!((ratio / (875.26 / 221.0) - 1.0).abs() < 0.01, "{ratio}");
    // the true trace is sampled at the analysis camera's exposure midpoints
    assert_eq!(art.true_trace.len(), art.out_of_loop[0].len());
    let truth: Vec<f64> = art.true_trace.iter().map(|p| p.z).collect();
    for trace in &art.out_of_loop {
        let est: Vec<f64> = trace.iter().map(|s| s.z_est).collect();
        let r = correlation(&truth, &est);
        assert!(r > 0.95, "{}: correlation {r}", trace[0].estimator.tag());
    }
    for (s, p) in art.out_of_loop[0].iter().zip(&art.true_trace) {
        assert_eq!(s.t, p.t);
    }
}

#[test]
fn zero_gain_loop_is_equivalent_to_feedback_off() {
    // high pressure keeps the variance estimate of a 10 s run tight
    let base = format!("{SHORT}\n[environment]\npressure_mbar = 1e-1\nexcess_force_psd_n2_per_hz = 0.0\n");
    let off = from_toml(&format!("{base}[feedback]\nenabled = false\n"));
    let zero = from_toml(&format!("{base}[feedback]\ngain = 0.0\n"));
    let (a, b) = (run_closed_loop(&off).unwrap(), run_closed_loop(&zero).unwrap());
    assert!(b.telemetry.iter().all(|act| act.volts == 0.0 && !act.saturated));
    assert_eq!(b.metadata.feedback.as_ref().unwrap().predicted_damping_per_s, 0.0);
    let expect = K_B * 300.0 / (a.metadata.mass_kg * a.metadata.omega0_rad_s.powi(2));
    let n_eff = a.metadata.gamma_per_s * 9.0 / 2.0;
    for art in [&a, &b] {
        let v = true_variance(art, 1.0);
        assert!((v / expect - 1.0).abs() < 3.0 * (2.0 / n_eff).sqrt(), "{v} vs {expect}");
    }
}

#[test]
fn feedback_reduces_the_area_at_the_same_seed() {
    let base = "[run]\nduration_s = 30.0\nseed = 5\n[environment]\npressure_mbar = 1e-3\n\
                [camera.in_loop]\nestimators = [\"centroid\"]\n[camera.out_of_loop]\nestimators = [\"centroid\"]\n";
    let on = from_toml(base);
    let off = from_toml(&format!("{base}[feedback]\nenabled = false\n"));
    let a_on = analyze_artifacts(&run_closed_loop(&on).unwrap(), &on).unwrap();
    let a_off = analyze_artifacts(&run_closed_loop(&off).unwrap(), &off).unwrap();
    assert!(a_on.peak.area < 0.2 * a_off.peak.area, "{} vs {}", a_on.peak.area, a_off.peak.area);
}

#[test]
fn strong_noiseless_cooling_reaches_three_kelvin() {
    // gain chosen so the predicted loop damping is 99 times the gas damping at
    // 1e-4 mbar; a short loop lag keeps the damping flat across the line
    let text = |gain: f64| {
        format!(
            "[run]\nduration_s = 120.0\nsettle_s = 10.0\nseed = 2\n\
             [environment]\npressure_mbar = 1e-4\nexcess_force_psd_n2_per_hz = 0.0\n\
             [camera.in_loop]\nestimators = [\"centroid\"]\ndetector_noise = false\n\
             [camera.out_of_loop]\nestimators = [\"centroid\"]\ndetector_noise = false\n\
             [feedback]\nsign = 1\ndelay_phase_deg = 43.3\nfilter_phase_deg = 20.0\ngain = {gain}\n\
             dac_full_scale_m = 200e-6\ndac_bits = 16\n"
        )
    };
    let probe = from_toml(&text(0.01));
    let gamma = probe.gas_damping().unwrap();
    let art = run_closed_loop(&probe).unwrap();
    let per_gain = art.metadata.feedback.unwrap().predicted_damping_per_s / 0.01;
    let gain = 99.0 * gamma / per_gain;
    let cfg = from_toml(&text(gain));
    let art = run_closed_loop(&cfg).unwrap();
    let fb = art.metadata.feedback.clone().unwrap();
    assert!((fb.predicted_damping_per_s / gamma - 99.0).abs() < 1e-6);
    let m = art.metadata.mass_kg;
    let w = art.metadata.omega0_rad_s;
    let t_true = m * w * w * true_variance(&art, cfg.run.settle_s) / K_B;
    let t_loop = m * w * w * closed_loop_variance(&cfg) / K_B;
    let n_eff = 100.0 * gamma * 110.0 / 2.0;
    assert!((t_true / t_loop - 1.0).abs() < 3.0 * (2.0 / n_eff).sqrt(), "{t_true} vs {t_loop} K");
    assert!((t_true / 3.0 - 1.0).abs() < 0.15, "{t_true} K");
}

/// Stationary variance of the sampled loop treated as a continuous LTI
/// system: force gain `G(w)` made of the digital filter, the coarse and fine
/// delay, the processing latency and the zero-order hold.
fn closed_loop_variance(cfg: &ExperimentConfig) -> f64 {
    let fb = cfg.feedback_config().unwrap();
    let fs = cfg.loop_rate().unwrap();
    let m = cfg.mass();
    let w0 = cfg.trap.omega0;
    let gamma = cfg.gas_damping().unwrap();
    let s_f = 4.0 * K_B * cfg.environment.bath_temperature * m * gamma;
    let biquad = Biquad::lowpass(fb.filter.cutoff_hz, fb.filter.q, fs).unwrap();
    let tau = fb.coarse_delay_frames as f64 / fs + fb.fine_delay + fb.processing_latency;
    let k = fb.force_coeff * fb.gain * fb.sign * fb.dac.volts_per_meter();
    let t = 1.0 / fs;
    let g = |w: f64| -> Complex64 {
        let h = biquad.response(w / (2.0 * PI), fs);
        let x = 0.5 * w * t;
        let hold = if x == 0.0 { 1.0 } else { x.sin() / x };
        k * h * Complex64::from_polar(hold, -w * tau - x)
    };
    // integrate |chi|^2 S_F over f on a fine grid around the line and a coarse one elsewhere
    let chi2 = |f: f64| {
        let w = 2.0 * PI * f;
        let d = Complex64::new(m * (w0 * w0 - w * w), m * gamma * w) - g(w);
        1.0 / d.norm_sqr()
    };
    let f_max = 0.5 * fs;
    let n = 400_000;
    let h = f_max / n as f64;
    let mut sum = 0.5 * (chi2(0.0) + chi2(f_max));
    for i in 1..n {
        sum += chi2(i as f64 * h);
    }
    s_f * sum * h
}

#[test]
fn moderate_gain_matches_the_closed_loop_integral() {
    let base = ExperimentConfig::load(&config_path("small_gain_oracle.toml")).unwrap();
    let expect = closed_loop_variance(&base);
    let mut vars = Vec::new();
    for seed in 1..=4 {
        let mut file = base.file.clone();
        file.run.seed = seed;
        file.run.duration_s = 200.0;
        file.camera.out_of_loop = None;
        let cfg = file.resolve().unwrap();
        let art = run_closed_loop(&cfg).unwrap();
        vars.push(true_variance(&art, cfg.run.settle_s));
    }
    let mean = vars.iter().sum::<f64>() / vars.len() as f64;
    // relative scatter of a variance from 4 x 200 s with damping near 6.5/s
    let n_eff: f64 = 4.0 * 198.0 * 6.5 / 2.0;
    let tol = 3.0 * (2.0 / n_eff).sqrt();
    assert!((mean / expect - 1.0).abs() < tol, "sim {mean}, integral {expect}, tol {tol}");
}

#[test]
fn run_directory_round_trip() {
    let cfg = from_toml(SHORT);
    let art = run_closed_loop(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(dir.path(), &cfg, &art).unwrap();
    let (t, z) = read_trace_csv(&dir.path().join("out_of_loop.csv")).unwrap();
    assert_eq!(t.len(), art.out_of_loop[0].len());
    assert_eq!(z[5], art.out_of_loop[0][5].z_est);
    let from_disk = analyze_run_dir(dir.path()).unwrap();
    let in_memory = analyze_artifacts(&art, &cfg).unwrap();
    assert_eq!(from_disk.peak.area, in_memory.peak.area);
    assert!(dir.path().join("psd.csv").exists() && dir.path().join("analysis.json").exists());
}

#[test]
fn pressure_sweep_closes_on_room_temperature() {
    let cfg = from_toml(
        r#"
[run]
duration_s = 40.0
seed = 11
[camera.in_loop]
estimators = ["centroid"]
[camera.out_of_loop]
estimators = ["centroid"]
[analysis]
reference_runs = 2
[sweep]
pressure_mbar = { start = 1e-2, stop = 1.0, points = 3 }
seeds_per_point = 1
compare_feedback_off = true
"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&cfg, Axis::Pressure, Some(dir.path())).unwrap();
    let off = out.curve(Variant::FeedbackOff).unwrap();
    for r in &off.rows {
        assert!((r.t_eff / 300.0 - 1.0).abs() < 0.15, "{} mbar: {} K", r.param, r.t_eff);
    }
    let again = analyze_sweep_dir(dir.path()).unwrap();
    assert_eq!(again.curves, out.curves);
}
