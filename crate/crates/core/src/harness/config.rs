//! Experiment configuration files.
//!
//! TOML, one table per subsystem. Every key has a default except where
//! noted, and unknown keys are rejected. A minimal file:
//!
//! ```toml
//! [run]
//! duration_s = 60.0
//! seed = 7
//!
//! [environment]
//! pressure_mbar = 1e-4
//!
//! [camera.out_of_loop]
//! fps = "87526/100"
//!
//! [feedback]
//! enabled = false
//! ```
//!
//! Tables: `[run]`, `[particle]`, `[trap]`, `[environment]`,
//! `[camera.in_loop]`, `[camera.out_of_loop]`, `[feedback]`, `[analysis]`,
//! `[sweep]`, `[output]`. Field meanings and units are carried by the key
//! suffixes (`_s`, `_m`, `_hz`, `_mbar`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Band, BandPolicy, WelchParams, Window};
use crate::dynamics::{Environment, ParticleProps, TrapConfig};
use crate::feedback::{
    calibrate_cutoff, delay_for_phase, force_coefficient, split_delay, DacConfig, FeedbackConfig,
    FilterConfig,
};
use crate::imaging::{CameraLabel, CameraModel, Fps, MotionBlur};
use crate::localization::{BackgroundPolicy, Estimator};
use crate::units::AIR_MOLECULAR_MASS;
use crate::{Error, Result};

/// Default excess (non-thermal) force PSD, N^2/Hz.
pub const DEFAULT_EXCESS_FORCE_PSD: f64 = 3.55e-37;

/// Delay phase used when neither a phase nor explicit delays are given, degrees.
pub const DEFAULT_DELAY_PHASE_DEG: f64 = 110.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub duration_s: f64,
    /// Initial part of every trace dropped by the analysis, s.
    pub settle_s: f64,
    pub seed: u64,
    pub physics_substeps_per_frame: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            duration_s: 60.0,
            settle_s: 2.0,
            seed: 1,
            physics_substeps_per_frame: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleSection {
    pub diameter_m: f64,
    pub density_kg_m3: f64,
    pub charge_e: i64,
}

impl Default for ParticleSection {
    fn default() -> Self {
        let p = ParticleProps::default();
        ParticleSection {
            diameter_m: p.diameter,
            density_kg_m3: p.density,
            charge_e: p.charge_number,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapSection {
    /// Secular frequency `omega0 / 2 pi`, Hz.
    pub omega0_hz: f64,
    pub z0_m: f64,
    pub r0_m: f64,
    pub drive_freq_hz: f64,
    pub v_endcap_v: f64,
    pub v_ac_pp_v: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        let t = TrapConfig::default();
        TrapSection {
            omega0_hz: t.f0(),
            z0_m: t.z0,
            r0_m: t.r0,
            drive_freq_hz: t.drive_freq,
            v_endcap_v: t.v_endcap,
            v_ac_pp_v: t.v_ac_pp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSection {
    pub pressure_mbar: f64,
    pub bath_temperature_k: f64,
    /// Gas molecular mass, atomic mass units.
    pub gas_mass_amu: f64,
    pub excess_force_psd_n2_per_hz: f64,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        EnvironmentSection {
            pressure_mbar: 1e-4,
            bath_temperature_k: 300.0,
            gas_mass_amu: AIR_MOLECULAR_MASS / crate::units::AMU,
            excess_force_psd_n2_per_hz: DEFAULT_EXCESS_FORCE_PSD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fps: Option<Fps>,
    pub pixel_pitch_m: Option<f64>,
    pub magnification: Option<f64>,
    pub roi_width_px: Option<usize>,
    pub roi_height_px: Option<usize>,
    pub psf_sigma_px: Option<f64>,
    pub photons_per_frame: Option<f64>,
    pub background_per_px: Option<f64>,
    pub read_noise_rms: Option<f64>,
    pub exposure_fraction: Option<f64>,
    pub detector_noise: Option<bool>,
    /// `"midpoint"` or `"average:N"`.
    pub motion_blur: Option<String>,
    /// Estimator names: `peak`, `centroid` (power from `centroid_power`),
    /// `centroid_pN`, `gaussian_fit`. The first one feeds the loop (in-loop)
    /// or the analysis (out-of-loop).
    pub estimators: Option<Vec<String>>,
    pub centroid_power: Option<u32>,
    /// `none`, `border-median` or `threshold:T`.
    pub background: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasSection {
    pub in_loop: Option<CameraSection>,
    pub out_of_loop: Option<CameraSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSection {
    pub enabled: bool,
    /// Delay as a phase of the secular motion, degrees. Exclusive with the
    /// explicit `coarse_delay_frames` / `fine_delay_s` pair.
    pub delay_phase_deg: Option<f64>,
    pub coarse_delay_frames: Option<usize>,
    pub fine_delay_s: Option<f64>,
    pub gain: f64,
    /// Filter lag at the secular frequency, degrees; exclusive with
    /// `filter_cutoff_hz`.
    pub filter_phase_deg: Option<f64>,
    pub filter_cutoff_hz: Option<f64>,
    pub filter_q: f64,
    pub dac_bits: u32,
    pub dac_vref_v: f64,
    pub dac_full_scale_m: f64,
    pub sign: i32,
    pub geometry_factor: f64,
    pub processing_latency_s: f64,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        let dac = DacConfig::default();
        FeedbackSection {
            enabled: true,
            delay_phase_deg: None,
            coarse_delay_frames: None,
            fine_delay_s: None,
            gain: 0.05,
            filter_phase_deg: None,
            filter_cutoff_hz: None,
            filter_q: std::f64::consts::FRAC_1_SQRT_2,
            dac_bits: dac.bits,
            dac_vref_v: dac.vref,
            dac_full_scale_m: dac.full_scale_m,
            sign: -1,
            geometry_factor: 0.25,
            processing_latency_s: 0.9e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub segment_len: usize,
    pub overlap: f64,
    pub window: String,
    pub band_fwhm_multiple: f64,
    pub band_min_half_width_hz: f64,
    pub band_max_nyquist_fraction: f64,
    /// Peak search range; defaults to the trap validity band.
    pub search_lo_hz: Option<f64>,
    pub search_hi_hz: Option<f64>,
    pub t_room_k: f64,
    pub reference_pressure_mbar: f64,
    pub reference_runs: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let w = WelchParams::default();
        let b = BandPolicy::default();
        AnalysisSection {
            segment_len: w.segment_len,
            overlap: w.overlap,
            window: w.window.to_string(),
            band_fwhm_multiple: b.fwhm_multiple,
            band_min_half_width_hz: b.min_half_width_hz,
            band_max_nyquist_fraction: b.max_nyquist_fraction,
            search_lo_hz: None,
            search_hi_hz: None,
            t_room_k: 300.0,
            reference_pressure_mbar: 1e-2,
            reference_runs: 4,
        }
    }
}

/// Sweep grid given either as a list or as `start`/`stop` with `step`
/// (linear) or `points` (log-spaced).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Linear { start: f64, stop: f64, step: f64 },
    Log { start: f64, stop: f64, points: usize },
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        let v = match *self {
            GridSpec::List(ref v) => v.clone(),
            GridSpec::Linear { start, stop, step } => {
                if !(step > 0.0) || stop < start {
                    return Err(Error::config("linear grid needs step > 0 and stop >= start"));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
                (0..n).map(|i| start + i as f64 * step).collect()
            }
            GridSpec::Log { start, stop, points } => {
                if !(start > 0.0 && stop > 0.0) || points < 2 {
                    return Err(Error::config("log grid needs positive ends and >= 2 points"));
                }
                let (a, b) = (start.ln(), stop.ln());
                (0..points)
                    .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
                    .collect()
            }
        };
        if v.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub phase_deg: Option<GridSpec>,
    pub gain: Option<GridSpec>,
    pub pressure_mbar: Option<GridSpec>,
    pub seeds_per_point: usize,
    /// 0 picks the available parallelism; `LEVICOOL_WORKERS` overrides.
    pub workers: usize,
    pub compare_feedback_off: bool,
    /// Also run every point with noiseless cameras.
    pub compare_noiseless: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            phase_deg: None,
            gain: None,
            pressure_mbar: None,
            seeds_per_point: 4,
            workers: 0,
            compare_feedback_off: true,
            compare_noiseless: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Dump this many frames per camera (0 disables).
    pub frames: usize,
    pub telemetry: bool,
    /// Write full run directories for sweep runs.
    pub sweep_run_artifacts: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            frames: 0,
            telemetry: true,
            sweep_run_artifacts: false,
        }
    }
}

/// File-level layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunSection,
    pub particle: ParticleSection,
    pub trap: TrapSection,
    pub environment: EnvironmentSection,
    pub camera: CamerasSection,
    pub feedback: FeedbackSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

/// A camera with its estimator chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSetup {
    pub model: CameraModel,
    pub estimators: Vec<Estimator>,
    pub motion_blur: MotionBlur,
}

/// How the feedback delay and filter are specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DelaySpec {
    Phase(f64),
    Explicit { coarse_frames: usize, fine_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterSpec {
    Phase(f64),
    Cutoff(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSettings {
    pub enabled: bool,
    pub delay: DelaySpec,
    pub gain: f64,
    pub filter: FilterSpec,
    pub filter_q: f64,
    pub dac: DacConfig,
    pub sign: f64,
    pub geometry_factor: f64,
    pub processing_latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings {
    pub welch: WelchParams,
    pub band: BandPolicy,
    pub search: Option<Band>,
    pub t_room: f64,
    pub reference_pressure_mbar: f64,
    pub reference_runs: usize,
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub particle: ParticleProps,
    pub trap: TrapConfig,
    pub environment: Environment,
    pub in_loop: Option<CameraSetup>,
    pub out_of_loop: Option<CameraSetup>,
    pub feedback: FeedbackSettings,
    pub analysis: AnalysisSettings,
    pub sweep: SweepSection,
    pub output: OutputSection,
    /// File-level form this configuration was resolved from.
    pub file: ConfigFile,
    /// Source text when loaded unmodified from a file.
    pub source: Option<String>,
}

pub fn parse_estimator(name: &str, power: u32, background: BackgroundPolicy) -> Result<Estimator> {
    match name.trim() {
        "peak" => Ok(Estimator::Peak),
        "gaussian_fit" | "gaussian" => Ok(Estimator::GaussianFit),
        "centroid" => Ok(Estimator::Centroid { power, background }),
        other => other
            .strip_prefix("centroid_p")
            .and_then(|p| p.parse::<u32>().ok())
            .filter(|&p| p >= 1)
            .map(|power| Estimator::Centroid { power, background })
            .ok_or_else(|| Error::config(format!("unknown estimator {other:?}"))),
    }
}

fn camera_setup(sec: &CameraSection, mut model: CameraModel, default_power: u32) -> Result<CameraSetup> {
    if let Some(v) = sec.fps {
        model.fps = v;
    }
    macro_rules! take {
        ($field:ident, $key:ident) => {
            if let Some(v) = sec.$key {
                model.$field = v;
            }
        };
    }
    take!(pixel_pitch, pixel_pitch_m);
    take!(magnification, magnification);
    take!(roi_width, roi_width_px);
    take!(roi_height, roi_height_px);
    take!(psf_sigma, psf_sigma_px);
    take!(photons_per_frame, photons_per_frame);
    take!(background_per_px, background_per_px);
    take!(read_noise_rms, read_noise_rms);
    take!(exposure, exposure_fraction);
    take!(detector_noise, detector_noise);
    model.validate()?;
    let power = sec.centroid_power.unwrap_or(default_power);
    if power == 0 {
        return Err(Error::config("centroid_power must be >= 1"));
    }
    let background: BackgroundPolicy = match &sec.background {
        Some(s) => s.parse()?,
        None => BackgroundPolicy::BorderMedian,
    };
    let names = sec
        .estimators
        .clone()
        .unwrap_or_else(|| vec!["centroid".to_string()]);
    if names.is_empty() {
        return Err(Error::config(format!("{} camera needs at least one estimator", model.label)));
    }
    let estimators = names
        .iter()
        .map(|n| parse_estimator(n, power, background))
        .collect::<Result<Vec<_>>>()?;
    let motion_blur = match &sec.motion_blur {
        Some(s) => s.parse()?,
        None => MotionBlur::Midpoint,
    };
    Ok(CameraSetup {
        model,
        estimators,
        motion_blur,
    })
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {}", e.message())))
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let run = self.run.clone();
        if !(run.duration_s > 0.0 && run.duration_s.is_finite()) {
            return Err(Error::config("run.duration_s must be > 0"));
        }
        if !(run.settle_s >= 0.0 && run.settle_s < run.duration_s) {
            return Err(Error::config("run.settle_s must lie in [0, duration_s)"));
        }
        if run.physics_substeps_per_frame == 0 {
            return Err(Error::config("run.physics_substeps_per_frame must be >= 1"));
        }
        let particle = ParticleProps {
            diameter: self.particle.diameter_m,
            density: self.particle.density_kg_m3,
            charge_number: self.particle.charge_e,
        };
        particle.validate()?;
        let trap = TrapConfig {
            omega0: 2.0 * std::f64::consts::PI * self.trap.omega0_hz,
            z0: self.trap.z0_m,
            r0: self.trap.r0_m,
            drive_freq: self.trap.drive_freq_hz,
            v_endcap: self.trap.v_endcap_v,
            v_ac_pp: self.trap.v_ac_pp_v,
            ..TrapConfig::default()
        };
        trap.validate()?;
        let environment = Environment {
            pressure_mbar: self.environment.pressure_mbar,
            bath_temperature: self.environment.bath_temperature_k,
            gas_molecular_mass: self.environment.gas_mass_amu * crate::units::AMU,
            excess_force_psd: self.environment.excess_force_psd_n2_per_hz,
        };
        environment.validate()?;

        let in_loop = self
            .camera
            .in_loop
            .as_ref()
            .map(|c| camera_setup(c, CameraModel::in_loop_default(), 3))
            .transpose()?;
        let out_of_loop = self
            .camera
            .out_of_loop
            .as_ref()
            .map(|c| camera_setup(c, CameraModel::out_of_loop_default(), 1))
            .transpose()?;
        if in_loop.is_none() && out_of_loop.is_none() {
            return Err(Error::config("at least one camera must be configured"));
        }

        let f = &self.feedback;
        let delay = match (f.delay_phase_deg, f.coarse_delay_frames, f.fine_delay_s) {
            (Some(p), None, None) => {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::config("feedback.delay_phase_deg must be >= 0"));
                }
                DelaySpec::Phase(p)
            }
            (None, None, None) => DelaySpec::Phase(DEFAULT_DELAY_PHASE_DEG),
            (None, c, fine) => DelaySpec::Explicit {
                coarse_frames: c.unwrap_or(0),
                fine_s: fine.unwrap_or(0.0),
            },
            _ => {
                return Err(Error::config(
                    "give either feedback.delay_phase_deg or coarse_delay_frames/fine_delay_s",
                ))
            }
        };
        let filter = match (f.filter_phase_deg, f.filter_cutoff_hz) {
            (Some(p), None) => FilterSpec::Phase(p),
            (None, Some(c)) => FilterSpec::Cutoff(c),
            (None, None) => FilterSpec::Phase(150.0),
            _ => {
                return Err(Error::config(
                    "give either feedback.filter_phase_deg or feedback.filter_cutoff_hz",
                ))
            }
        };
        let feedback = FeedbackSettings {
            enabled: f.enabled,
            delay,
            gain: f.gain,
            filter,
            filter_q: f.filter_q,
            dac: DacConfig {
                bits: f.dac_bits,
                vref: f.dac_vref_v,
                full_scale_m: f.dac_full_scale_m,
            },
            sign: match f.sign {
                1 => 1.0,
                -1 => -1.0,
                s => return Err(Error::config(format!("feedback.sign must be +1 or -1, got {s}"))),
            },
            geometry_factor: f.geometry_factor,
            processing_latency: f.processing_latency_s,
        };
        if feedback.enabled && in_loop.is_none() {
            return Err(Error::config("feedback requires a [camera.in_loop] table"));
        }

        let a = &self.analysis;
        let search = match (a.search_lo_hz, a.search_hi_hz) {
            (None, None) => None,
            (lo, hi) => Some(Band {
                lo: lo.unwrap_or(trap.validity_band_hz.0),
                hi: hi.unwrap_or(trap.validity_band_hz.1),
            }),
        };
        let analysis = AnalysisSettings {
            welch: WelchParams {
                segment_len: a.segment_len,
                overlap: a.overlap,
                window: a.window.parse::<Window>()?,
            },
            band: BandPolicy {
                fwhm_multiple: a.band_fwhm_multiple,
                min_half_width_hz: a.band_min_half_width_hz,
                max_nyquist_fraction: a.band_max_nyquist_fraction,
            },
            search,
            t_room: a.t_room_k,
            reference_pressure_mbar: a.reference_pressure_mbar,
            reference_runs: a.reference_runs,
        };
        if !(analysis.reference_pressure_mbar > 0.0) || analysis.reference_runs == 0 {
            return Err(Error::config("analysis needs a positive reference pressure and >= 1 reference run"));
        }
        if self.sweep.seeds_per_point == 0 {
            return Err(Error::config("sweep.seeds_per_point must be >= 1"));
        }

        let cfg = ExperimentConfig {
            run,
            particle,
            trap,
            environment,
            in_loop,
            out_of_loop,
            feedback,
            analysis,
            sweep: self.sweep.clone(),
            output: self.output.clone(),
            file: self.clone(),
            source: None,
        };
        // resolve once so filter/delay errors surface at load time
        if cfg.in_loop.is_some() {
            cfg.feedback_config()?;
        }
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::parse(text)?.resolve()?;
        cfg.source = Some(text.to_string());
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Built-in defaults: both cameras, feedback on.
    pub fn default_experiment() -> Self {
        let file = ConfigFile {
            camera: CamerasSection {
                in_loop: Some(empty_camera()),
                out_of_loop: Some(empty_camera()),
            },
            ..ConfigFile::default()
        };
        file.resolve().expect("built-in defaults are valid")
    }

    /// TOML text reproducing this configuration.
    pub fn to_toml(&self) -> Result<String> {
        match &self.source {
            Some(s) => Ok(s.clone()),
            None => toml::to_string(&self.file).map_err(|e| Error::Parse(e.to_string())),
        }
    }

    pub fn mass(&self) -> f64 {
        self.particle.mass()
    }

    /// Gas damping rate at the configured pressure, 1/s.
    pub fn gas_damping(&self) -> Result<f64> {
        crate::dynamics::gas_damping_rate(&self.environment, &self.particle)
    }

    /// Camera whose trace is analyzed: out-of-loop when present.
    pub fn analysis_camera(&self) -> &CameraSetup {
        self.out_of_loop
            .as_ref()
            .or(self.in_loop.as_ref())
            .expect("validated: at least one camera")
    }

    /// Peak search band, clipped below the analysis camera's Nyquist rate.
    pub fn search_band(&self) -> Band {
        let nyq = 0.5 * self.analysis_camera().model.fps.hz();
        let b = self.analysis.search.unwrap_or(Band {
            lo: self.trap.validity_band_hz.0,
            hi: self.trap.validity_band_hz.1,
        });
        Band {
            lo: b.lo,
            hi: b.hi.min(self.analysis.band.max_nyquist_fraction * nyq),
        }
    }

    pub fn force_coeff(&self) -> f64 {
        force_coefficient(self.particle.charge(), self.feedback.geometry_factor, self.trap.z0)
    }

    /// Loop rate, Hz (in-loop fps).
    pub fn loop_rate(&self) -> Option<f64> {
        self.in_loop.as_ref().map(|c| c.model.fps.hz())
    }

    /// Concrete controller parameters: delay split into frames and a
    /// remainder, filter cutoff solved from the target phase.
    pub fn feedback_config(&self) -> Result<FeedbackConfig> {
        let rate = self
            .loop_rate()
            .ok_or_else(|| Error::config("feedback requires an in-loop camera"))?;
        let fb = &self.feedback;
        let (coarse, fine) = match fb.delay {
            DelaySpec::Phase(p) => split_delay(delay_for_phase(p, self.trap.omega0), rate),
            DelaySpec::Explicit {
                coarse_frames,
                fine_s,
            } => (coarse_frames, fine_s),
        };
        let cutoff = match fb.filter {
            FilterSpec::Cutoff(c) => c,
            FilterSpec::Phase(p) => calibrate_cutoff(p, self.trap.f0(), rate, fb.filter_q)?,
        };
        let cfg = FeedbackConfig {
            enabled: fb.enabled,
            coarse_delay_frames: coarse,
            fine_delay: fine,
            gain: fb.gain,
            filter: FilterConfig {
                cutoff_hz: cutoff,
                q: fb.filter_q,
            },
            dac: fb.dac,
            sign: fb.sign,
            force_coeff: self.force_coeff(),
            processing_latency: fb.processing_latency,
        };
        cfg.validate(1.0 / rate)?;
        Ok(cfg)
    }

    pub fn camera(&self, label: CameraLabel) -> Option<&CameraSetup> {
        match label {
            CameraLabel::InLoop => self.in_loop.as_ref(),
            CameraLabel::OutOfLoop => self.out_of_loop.as_ref(),
        }
    }
}

fn empty_camera() -> CameraSection {
    CameraSection {
        fps: None,
        pixel_pitch_m: None,
        magnification: None,
        roi_width_px: None,
        roi_height_px: None,
        psf_sigma_px: None,
        photons_per_frame: None,
        background_per_px: None,
        read_noise_rms: None,
        exposure_fraction: None,
        detector_noise: None,
        motion_blur: None,
        estimators: None,
        centroid_power: None,
        background: None,
    }
}
