#![allow(dead_code)]

use std::f64::consts::PI;

use levicool::feedback::{calibrate_cutoff, delay_for_phase, split_delay, Controller, DacConfig, FeedbackConfig, FilterConfig};
use levicool::localization::{Estimator, PositionSample};

pub const F0: f64 = 23.5;
pub const FPS: f64 = 221.0;

pub fn config(delay_phase: f64, filter_phase: f64) -> FeedbackConfig {
    let (coarse, fine) = split_delay(delay_for_phase(delay_phase, 2.0 * PI * F0), FPS);
    FeedbackConfig {
        enabled: true,
        coarse_delay_frames: coarse,
        fine_delay: fine,
        gain: 0.05,
        filter: FilterConfig {
            cutoff_hz: calibrate_cutoff(filter_phase, F0, FPS, std::f64::consts::FRAC_1_SQRT_2).unwrap(),
            q: std::f64::consts::FRAC_1_SQRT_2,
        },
        dac: DacConfig {
            bits: 16,
            vref: 3.3,
            full_scale_m: 200e-6,
        },
        sign: -1.0,
        force_coeff: 2.86e-15,
        processing_latency: 0.9e-3,
    }
}

/// Drives the controller with `amp * cos(w t_k)` sampled at the frame rate
/// and returns the fundamental of the held output voltage as
/// `(volts per meter of input, phase lag in degrees)`.
pub fn inject_sine(cfg: &FeedbackConfig, f: f64, amp: f64, periods: usize) -> (f64, f64) {
    let w = 2.0 * PI * f;
    let mut ctl = Controller::new(*cfg, FPS).unwrap();
    let n = (periods as f64 * FPS / f).round() as usize;
    // output switches at t_emit + latency and holds until the next switch
    let mut switches = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / FPS;
        let act = ctl
            .process(&PositionSample {
                z_est: amp * (w * t).cos(),
                x_est: 0.0,
                t,
                estimator: Estimator::Peak,
                quality: 1.0,
            })
            .unwrap();
        switches.push((act.t_emit + cfg.processing_latency, act.volts));
    }
    // discard the start-up transient, integrate over whole periods
    let t0 = switches[n / 4].0;
    let span = ((switches[n - 2].0 - t0) * f).floor() / f;
    let t1 = t0 + span;
    let (mut c, mut s) = (0.0, 0.0);
    for win in switches.windows(2) {
        let (a, v) = win[0];
        let b = win[1].0;
        let (a, b) = (a.max(t0), b.min(t1));
        if b <= a {
            continue;
        }
        c += v * ((w * b).sin() - (w * a).sin()) / w;
        s += v * (-(w * b).cos() + (w * a).cos()) / w;
    }
    let (c, s) = (2.0 * c / span, 2.0 * s / span);
    let gain = (c * c + s * s).sqrt() / amp;
    // v = g cos(w t - lag)  =>  c = g cos(lag), s = g sin(lag)
    let lag = s.atan2(c).to_degrees().rem_euclid(360.0);
    (gain, lag)
}

/// Phase lag in degrees of the emitted output samples, taken at their
/// emission instants, before latency and hold.
pub fn emitted_lag(cfg: &FeedbackConfig, f: f64, amp: f64, periods: usize) -> f64 {
    let w = 2.0 * PI * f;
    let mut ctl = Controller::new(*cfg, FPS).unwrap();
    let n = (periods as f64 * FPS / f).round() as usize;
    let (mut c, mut s) = (0.0, 0.0);
    for k in 0..n {
        let t = k as f64 / FPS;
        let act = ctl
            .process(&PositionSample {
                z_est: amp * (w * t).cos(),
                x_est: 0.0,
                t,
                estimator: Estimator::Peak,
                quality: 1.0,
            })
            .unwrap();
        if k >= n / 4 {
            c += act.volts * (w * act.t_emit).cos();
            s += act.volts * (w * act.t_emit).sin();
        }
    }
    s.atan2(c).to_degrees().rem_euclid(360.0)
}

pub fn circ_diff(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}

/// Path of a shipped configuration file.
pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}
