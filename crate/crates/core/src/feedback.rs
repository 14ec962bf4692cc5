//! Delayed velocity-damping feedback.
//!
//! The in-loop position stream is delayed by a whole number of frames
//! (`coarse_delay_frames`), low-pass filtered, scaled to the DAC range,
//! quantized, attenuated by `gain` and applied to an end-cap electrode.
//! The sub-frame part of the delay (`fine_delay`) is realized by scheduling
//! the actuation at `t_sample + fine_delay`; the harness adds its processing
//! latency on top.
//!
//! The low-pass filter is a bilinear-transformed second-order section with
//! the cutoff pre-warped (RBJ form):
//!
//! ```text
//! K  = tan(pi fc / fs),  n = 1 / (1 + K/Q + K^2)
//! b0 = K^2 n,  b1 = 2 b0,  b2 = b0
//! a1 = 2 (K^2 - 1) n,  a2 = (1 - K/Q + K^2) n
//! ```
//!
//! so the DC gain is exactly one.
//!
//! A force `F(t) = K z(t - lag)` with total phase lag `phi` at the secular
//! frequency splits into `K cos(phi) z - (K sin(phi) / w0) v`; the damping
//! it adds is therefore `K sin(phi) / (m w0)`, maximal at `phi = 90 deg`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::localization::PositionSample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub cutoff_hz: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacConfig {
    pub bits: u32,
    /// Full output span, V; the output swings over `+-vref/2`.
    pub vref: f64,
    /// Position mapped to `+vref/2`, m.
    pub full_scale_m: f64,
}

impl Default for DacConfig {
    fn default() -> Self {
        DacConfig {
            bits: 12,
            vref: 3.3,
            full_scale_m: 200e-6,
        }
    }
}

impl DacConfig {
    pub fn step(&self) -> f64 {
        self.vref / (1u64 << self.bits) as f64
    }

    pub fn volts_per_meter(&self) -> f64 {
        0.5 * self.vref / self.full_scale_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub enabled: bool,
    pub coarse_delay_frames: usize,
    /// Sub-frame delay, s.
    pub fine_delay: f64,
    /// Attenuation `V_FB / V0`.
    pub gain: f64,
    pub filter: FilterConfig,
    pub dac: DacConfig,
    /// `-1` when the electrode faces the negative sensor axis (an extra 180 deg).
    pub sign: f64,
    /// Force per volt on the electrode, N/V.
    pub force_coeff: f64,
    /// Frame midpoint to earliest actuation, s.
    pub processing_latency: f64,
}

impl FeedbackConfig {
    pub fn validate(&self, frame_period: f64) -> Result<()> {
        if !(self.fine_delay >= 0.0 && self.fine_delay < frame_period) {
            return Err(Error::config(format!(
                "fine_delay must lie in [0, {frame_period}) s, got {}",
                self.fine_delay
            )));
        }
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(Error::config("feedback gain must be >= 0"));
        }
        if !(8..=16).contains(&self.dac.bits) {
            return Err(Error::config(format!("DAC bits must be in [8, 16], got {}", self.dac.bits)));
        }
        if !(self.dac.vref > 0.0 && self.dac.full_scale_m > 0.0) {
            return Err(Error::config("DAC vref and full scale must be > 0"));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::config("feedback sign must be +1 or -1"));
        }
        if !(self.processing_latency >= 0.0) {
            return Err(Error::config("processing latency must be >= 0"));
        }
        if !(self.filter.q > 0.0) {
            return Err(Error::config("filter Q must be > 0"));
        }
        let nyquist = 0.5 / frame_period;
        if !(self.filter.cutoff_hz > 0.0 && self.filter.cutoff_hz < nyquist) {
            return Err(Error::config(format!(
                "filter cutoff {} Hz must lie in (0, {nyquist}) Hz",
                self.filter.cutoff_hz
            )));
        }
        Ok(())
    }

    /// Configured delay `coarse / fps + fine`, s.
    pub fn total_delay(&self, fps: f64) -> f64 {
        self.coarse_delay_frames as f64 / fps + self.fine_delay
    }
}

/// Force coefficient `charge * geometry_factor / z0`, N/V.
pub fn force_coefficient(charge: f64, geometry_factor: f64, z0: f64) -> f64 {
    charge * geometry_factor / z0
}

/// Quarter-period delay `pi / (2 w0)` that turns position into velocity.
pub fn optimal_delay(omega0: f64) -> f64 {
    PI / (2.0 * omega0)
}

/// Delay realizing a phase lag of `phase_deg` at `omega0`.
pub fn delay_for_phase(phase_deg: f64, omega0: f64) -> f64 {
    phase_deg.to_radians() / omega0
}

/// Splits a delay into whole frames and a remainder in `[0, 1/fps)`.
pub fn split_delay(total_delay: f64, fps: f64) -> (usize, f64) {
    let frames = total_delay * fps;
    // tolerate representation error on exact multiples of the frame period
    let coarse = (frames + 1e-9).floor().max(0.0);
    let fine = (total_delay - coarse / fps).max(0.0);
    (coarse as usize, fine)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    s1: f64,
    s2: f64,
}

impl Biquad {
    pub fn lowpass(cutoff_hz: f64, q: f64, fs: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0 && cutoff_hz < 0.5 * fs) {
            return Err(Error::config(format!(
                "low-pass cutoff {cutoff_hz} Hz must lie below Nyquist {} Hz",
                0.5 * fs
            )));
        }
        if !(q > 0.0) {
            return Err(Error::config("filter Q must be > 0"));
        }
        let k = (PI * cutoff_hz / fs).tan();
        let n = 1.0 / (1.0 + k / q + k * k);
        let b0 = k * k * n;
        Ok(Biquad {
            b0,
            b1: 2.0 * b0,
            b2: b0,
            a1: 2.0 * (k * k - 1.0) * n,
            a2: (1.0 - k / q + k * k) * n,
            s1: 0.0,
            s2: 0.0,
        })
    }

    /// Transposed direct form II update.
    pub fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.s1;
        self.s1 = self.b1 * x - self.a1 * y + self.s2;
        self.s2 = self.b2 * x - self.a2 * y;
        y
    }

    pub fn reset(&mut self) {
        self.s1 = 0.0;
        self.s2 = 0.0;
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let zi = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let num = self.b0 + zi * (self.b1 + zi * self.b2);
        let den = 1.0 + zi * (self.a1 + zi * self.a2);
        num / den
    }

    /// Phase lag at `f`, degrees in `[0, 360)`.
    pub fn phase_lag_deg(&self, f: f64, fs: f64) -> f64 {
        (-self.response(f, fs).arg().to_degrees()).rem_euclid(360.0)
    }
}

/// Cutoff giving a phase lag of `target_deg` at `f0` for the discrete filter
/// running at `fs`.
pub fn calibrate_cutoff(target_deg: f64, f0: f64, fs: f64, q: f64) -> Result<f64> {
    if !(target_deg > 0.0 && target_deg < 180.0) {
        return Err(Error::config(format!(
            "target filter phase {target_deg} deg outside (0, 180)"
        )));
    }
    let lag = |fc: f64| Biquad::lowpass(fc, q, fs).map(|b| b.phase_lag_deg(f0, fs));
    // lag falls monotonically as the cutoff rises
    let (mut lo, mut hi) = (1e-6 * fs, 0.499_999 * fs);
    if lag(lo)? < target_deg || lag(hi)? > target_deg {
        return Err(Error::config(format!(
            "no cutoff reaches {target_deg} deg of lag at {f0} Hz"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lag(mid)? > target_deg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DacOutput {
    /// Electrode voltage offset from the static end-cap voltage, V.
    pub volts: f64,
    pub saturated: bool,
}

/// Maps a position to the DAC pin voltage, quantizes it and applies the
/// attenuator and electrode sign.
pub fn dac_output(value: f64, dac: &DacConfig, gain: f64, sign: f64) -> DacOutput {
    let half = 0.5 * dac.vref;
    let pin = value * dac.volts_per_meter();
    let step = dac.step();
    let max_code = ((1i64 << (dac.bits - 1)) - 1) as f64;
    let min_code = -((1i64 << (dac.bits - 1)) as f64);
    let raw_code = (pin / step).round();
    let code = raw_code.clamp(min_code, max_code);
    let saturated = pin.abs() > half || code != raw_code;
    DacOutput {
        volts: sign * gain * code * step,
        saturated,
    }
}

/// Force on the particle for an electrode voltage, N.
pub fn force_on_particle(v_fb: f64, cfg: &FeedbackConfig) -> f64 {
    cfg.force_coeff * v_fb
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopTiming {
    /// Actuation (in-loop frame) rate, Hz.
    pub fps: f64,
}

/// Phase lag contributions at the secular frequency, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseBudget {
    pub delay_deg: f64,
    pub latency_deg: f64,
    pub hold_deg: f64,
    pub filter_deg: f64,
    pub sign_deg: f64,
}

impl PhaseBudget {
    pub fn total_deg(&self) -> f64 {
        self.delay_deg + self.latency_deg + self.hold_deg + self.filter_deg + self.sign_deg
    }
}

pub fn phase_budget(cfg: &FeedbackConfig, omega0: f64, timing: &LoopTiming) -> Result<PhaseBudget> {
    let fs = timing.fps;
    let filter = Biquad::lowpass(cfg.filter.cutoff_hz, cfg.filter.q, fs)?;
    let f0 = omega0 / (2.0 * PI);
    Ok(PhaseBudget {
        delay_deg: (omega0 * cfg.total_delay(fs)).to_degrees(),
        latency_deg: (omega0 * cfg.processing_latency).to_degrees(),
        // zero-order hold delays by half an actuation interval
        hold_deg: (0.5 * omega0 / fs).to_degrees(),
        filter_deg: filter.phase_lag_deg(f0, fs),
        sign_deg: if cfg.sign < 0.0 { 180.0 } else { 0.0 },
    })
}

/// Loop stiffness `K` (N/m) at the secular frequency, including the filter
/// magnitude and the hold's sinc attenuation.
pub fn loop_stiffness(cfg: &FeedbackConfig, omega0: f64, timing: &LoopTiming) -> Result<f64> {
    let fs = timing.fps;
    let filter = Biquad::lowpass(cfg.filter.cutoff_hz, cfg.filter.q, fs)?;
    let x = 0.5 * omega0 / fs;
    let hold = x.sin() / x;
    Ok(cfg.force_coeff * cfg.gain * cfg.dac.volts_per_meter()
        * filter.response(omega0 / (2.0 * PI), fs).norm()
        * hold)
}

/// Small-gain feedback damping rate `K sin(phi) / (m w0)`, 1/s. Negative
/// values heat.
pub fn predicted_effective_damping(
    cfg: &FeedbackConfig,
    mass: f64,
    omega0: f64,
    timing: &LoopTiming,
) -> Result<f64> {
    if !cfg.enabled {
        return Ok(0.0);
    }
    let k = loop_stiffness(cfg, omega0, timing)?;
    let phi = phase_budget(cfg, omega0, timing)?.total_deg().to_radians();
    Ok(k * phi.sin() / (mass * omega0))
}

/// Effective temperature `T gamma / (gamma + Gamma_fb)` for a noiseless detector.
pub fn predicted_temperature(bath_temperature: f64, gamma: f64, gamma_fb: f64) -> f64 {
    bath_temperature * gamma / (gamma + gamma_fb)
}

/// Output of one controller iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Actuation {
    pub tick: u64,
    /// Sample (frame midpoint) time, s.
    pub t: f64,
    /// Scheduled emission time `t + fine_delay`, s.
    pub t_emit: f64,
    pub raw: f64,
    pub delayed: f64,
    pub filtered: f64,
    pub volts: f64,
    pub saturated: bool,
}

/// Delay line, filter and DAC of the feedback chain.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: FeedbackConfig,
    buffer: VecDeque<f64>,
    filter: Biquad,
    last_t: Option<f64>,
    last_output_v: f64,
    tick: u64,
    saturation_count: u64,
}

impl Controller {
    /// `rate` is the actuation rate (in-loop fps).
    pub fn new(cfg: FeedbackConfig, rate: f64) -> Result<Self> {
        cfg.validate(1.0 / rate)?;
        let filter = Biquad::lowpass(cfg.filter.cutoff_hz, cfg.filter.q, rate)?;
        Ok(Controller {
            buffer: VecDeque::from(vec![0.0; cfg.coarse_delay_frames]),
            cfg,
            filter,
            last_t: None,
            last_output_v: 0.0,
            tick: 0,
            saturation_count: 0,
        })
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.cfg
    }

    pub fn last_output_v(&self) -> f64 {
        self.last_output_v
    }

    pub fn saturation_count(&self) -> u64 {
        self.saturation_count
    }

    /// Pushes a sample into the delay line and returns the value emitted
    /// `coarse_delay_frames` samples back (zero until the line fills) with
    /// its emission time.
    pub fn ingest_sample(&mut self, sample: &PositionSample) -> Result<(f64, f64)> {
        if let Some(last) = self.last_t {
            if !(sample.t > last) {
                return Err(Error::Sequencing { t: sample.t, last });
            }
        }
        self.last_t = Some(sample.t);
        self.buffer.push_back(sample.z_est);
        let delayed = self.buffer.pop_front().unwrap_or(0.0);
        Ok((delayed, sample.t + self.cfg.fine_delay))
    }

    pub fn lowpass_step(&mut self, value: f64) -> f64 {
        self.filter.step(value)
    }

    /// Full chain for one in-loop sample.
    pub fn process(&mut self, sample: &PositionSample) -> Result<Actuation> {
        let (delayed, t_emit) = self.ingest_sample(sample)?;
        let filtered = self.lowpass_step(delayed);
        let out = if self.cfg.enabled {
            dac_output(filtered, &self.cfg.dac, self.cfg.gain, self.cfg.sign)
        } else {
            DacOutput {
                volts: 0.0,
                saturated: false,
            }
        };
        if out.saturated {
            self.saturation_count += 1;
        }
        self.last_output_v = out.volts;
        let act = Actuation {
            tick: self.tick,
            t: sample.t,
            t_emit,
            raw: sample.z_est,
            delayed,
            filtered,
            volts: out.volts,
            saturated: out.saturated,
        };
        self.tick += 1;
        Ok(act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::Estimator;
    use approx::assert_relative_eq;

    fn sample(t: f64, z: f64) -> PositionSample {
        PositionSample {
            z_est: z,
            x_est: 0.0,
            t,
            estimator: Estimator::Peak,
            quality: 1.0,
        }
    }

    fn cfg() -> FeedbackConfig {
        FeedbackConfig {
            enabled: true,
            coarse_delay_frames: 2,
            fine_delay: 1e-3,
            gain: 0.01,
            filter: FilterConfig {
                cutoff_hz: 8.0,
                q: std::f64::consts::FRAC_1_SQRT_2,
            },
            dac: DacConfig::default(),
            sign: -1.0,
            force_coeff: 2.86e-15,
            processing_latency: 0.9e-3,
        }
    }

    #[test]
    fn optimal_delay_values() {
        assert_relative_eq!(optimal_delay(2.0 * PI * 23.5), 1.0 / (4.0 * 23.5), max_relative = 1e-15);
        assert_relative_eq!(optimal_delay(2.0 * PI * 25.0), 0.010, max_relative = 1e-15);
        assert_relative_eq!(optimal_delay(2.0), 0.5 * optimal_delay(1.0), max_relative = 1e-15);
    }

    #[test]
    fn split_delay_cases() {
        let (c, f) = split_delay(1.0 / (4.0 * 23.5), 221.0);
        assert_eq!(c, 2);
        assert!((f - 1.588e-3).abs() < 1e-6, "{f}");
        let (c, f) = split_delay(2.0 / 221.0, 221.0);
        assert_eq!((c, f), (2, 0.0));
        assert_eq!(split_delay(1e-3, 221.0), (0, 1e-3));
    }

    #[test]
    fn delay_line_shifts_by_coarse_frames() {
        let mut c = cfg();
        c.coarse_delay_frames = 0;
        c.fine_delay = 0.0;
        let mut ctl = Controller::new(c, 221.0).unwrap();
        assert_eq!(ctl.ingest_sample(&sample(0.1, 4.0)).unwrap(), (4.0, 0.1));

        let mut ctl = Controller::new(cfg(), 221.0).unwrap();
        let out: Vec<f64> = (0..6)
            .map(|k| ctl.ingest_sample(&sample(k as f64, k as f64 + 1.0)).unwrap().0)
            .collect();
        assert_eq!(out, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn out_of_order_samples_are_rejected() {
        let mut ctl = Controller::new(cfg(), 221.0).unwrap();
        ctl.ingest_sample(&sample(1.0, 0.0)).unwrap();
        assert!(matches!(
            ctl.ingest_sample(&sample(1.0, 0.0)),
            Err(Error::Sequencing { .. })
        ));
    }

    #[test]
    fn lowpass_has_unit_dc_gain() {
        let mut f = Biquad::lowpass(8.0, 0.7, 221.0).unwrap();
        let mut y = 0.0;
        for _ in 0..2000 {
            y = f.step(3.5);
        }
        assert_relative_eq!(y, 3.5, max_relative = 1e-12);
        assert!(Biquad::lowpass(110.5, 0.7, 221.0).is_err());
    }

    #[test]
    fn measured_filter_phase_matches_closed_form() {
        let fs = 221.0;
        for &(fc, f) in &[(8.0, 23.5), (20.0, 23.5), (5.0, 11.0)] {
            let mut filt = Biquad::lowpass(fc, 0.7071, fs).unwrap();
            let expect = filt.phase_lag_deg(f, fs);
            // sine injection, lock-in over whole periods after the transient
            let w = 2.0 * PI * f / fs;
            let (mut i_acc, mut q_acc) = (0.0, 0.0);
            for n in 0..40_000 {
                let y = filt.step((w * n as f64).sin());
                if n >= 20_000 {
                    i_acc += y * (w * n as f64).sin();
                    q_acc += y * (w * n as f64).cos();
                }
            }
            let lag = (-q_acc.atan2(i_acc).to_degrees()).rem_euclid(360.0);
            assert!((lag - expect).abs() < 2.0, "{fc} {f}: {lag} vs {expect}");
        }
    }

    #[test]
    fn cutoff_helper_hits_150_degrees() {
        let fc = calibrate_cutoff(150.0, 23.5, 221.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        let lag = Biquad::lowpass(fc, std::f64::consts::FRAC_1_SQRT_2, 221.0)
            .unwrap()
            .phase_lag_deg(23.5, 221.0);
        assert!((lag - 150.0).abs() < 1e-6);
        assert!(calibrate_cutoff(200.0, 23.5, 221.0, 0.7).is_err());
    }

    #[test]
    fn dac_basics() {
        let dac = DacConfig::default();
        assert_eq!(dac_output(0.0, &dac, 0.5, -1.0).volts, 0.0);
        assert_eq!(dac_output(30e-6, &dac, 0.0, 1.0).volts, 0.0);
        assert_relative_eq!(dac.step(), 0.805_664e-3, max_relative = 1e-5);
        let sat = dac_output(1.0, &dac, 1.0, 1.0);
        assert!(sat.saturated);
        assert!(sat.volts <= 1.65);
        let neg = dac_output(-1.0, &dac, 1.0, 1.0);
        assert!(neg.saturated && (neg.volts + 1.65).abs() < 1e-12);
    }

    #[test]
    fn dac_quantization_noise_is_uniform() {
        use rand::{Rng, SeedableRng};
        let dac = DacConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut var = 0.0;
        let mut hist = [0usize; 10];
        for _ in 0..n {
            let v: f64 = rng.random_range(-50e-6..50e-6);
            let err = dac_output(v, &dac, 1.0, 1.0).volts - v * dac.volts_per_meter();
            var += err * err;
            let bin = ((err / dac.step() + 0.5) * 10.0).floor().clamp(0.0, 9.0) as usize;
            hist[bin] += 1;
        }
        let var = var / n as f64;
        assert_relative_eq!(var, dac.step().powi(2) / 12.0, max_relative = 0.02);
        for h in hist {
            assert!((h as f64 / (n as f64 / 10.0) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn force_is_linear_in_voltage() {
        let c = cfg();
        assert_eq!(force_on_particle(0.0, &c), 0.0);
        assert_relative_eq!(force_on_particle(2.0, &c), 2.0 * force_on_particle(1.0, &c));
        // 500 e on a 0.25 geometry factor at z0 = 7 mm
        let k = force_coefficient(500.0 * crate::units::ELEMENTARY_CHARGE, 0.25, 7e-3);
        assert_relative_eq!(k, 2.861_029_7e-15, max_relative = 1e-6);
    }

    #[test]
    fn damping_sign_follows_loop_phase() {
        let omega0 = 2.0 * PI * 23.5;
        let timing = LoopTiming { fps: 221.0 };
        let mut c = cfg();
        c.processing_latency = 0.0;
        c.sign = 1.0;
        let cutoff_lag = phase_budget(&c, omega0, &timing).unwrap();
        let fixed = cutoff_lag.filter_deg + cutoff_lag.hold_deg;
        let set_total = |c: &mut FeedbackConfig, total: f64| {
            let delay = delay_for_phase((total - fixed).rem_euclid(360.0), omega0);
            let (coarse, fine) = split_delay(delay, 221.0);
            c.coarse_delay_frames = coarse;
            c.fine_delay = fine;
        };
        set_total(&mut c, 90.0);
        let g90 = predicted_effective_damping(&c, 1e-16, omega0, &timing).unwrap();
        set_total(&mut c, 270.0);
        let g270 = predicted_effective_damping(&c, 1e-16, omega0, &timing).unwrap();
        set_total(&mut c, 150.0);
        let g150 = predicted_effective_damping(&c, 1e-16, omega0, &timing).unwrap();
        assert!(g90 > 0.0 && g270 < 0.0);
        assert_relative_eq!(g90, -g270, max_relative = 1e-6);
        assert!(g150 < g90);
    }
}
