//! Event-driven closed-loop simulation.
//!
//! Events are camera exposure samples, controller actuations and physics
//! substep boundaries. Between two events the particle is advanced with the
//! exact propagator under the force currently held by the DAC. Per in-loop
//! frame: render at the exposure midpoint, localize, push through the
//! controller, and schedule the actuation at `t + fine_delay + latency`
//! (never before the frame is complete). The out-of-loop camera runs on its
//! own clock against the same trajectory.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    stationary_temperature, thermal_force_psd, thermal_init, ParticleState, Plant,
    Propagator,
};
use crate::feedback::{
    force_on_particle, phase_budget, predicted_effective_damping, Actuation, Controller,
    FeedbackConfig, LoopTiming,
};
use crate::harness::clock::LoopClock;
use crate::harness::config::{CameraSetup, ExperimentConfig};
use crate::imaging::{render_frame, CameraLabel, Frame, NoiseStreams};
use crate::localization::{localize, PixelCalibration, PositionSample};
use crate::{Error, Result};

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Thermal = 1,
    Excess = 2,
    InLoopShot = 3,
    InLoopRead = 4,
    OutOfLoopShot = 5,
    OutOfLoopRead = 6,
    Init = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruePoint {
    pub t: f64,
    pub z: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossInfo {
    pub camera: CameraLabel,
    pub t: f64,
    pub center_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub coarse_delay_frames: usize,
    pub fine_delay_s: f64,
    pub delay_phase_deg: f64,
    pub filter_cutoff_hz: f64,
    pub filter_phase_deg: f64,
    pub total_phase_deg: f64,
    pub force_coeff_n_per_v: f64,
    pub predicted_damping_per_s: f64,
    pub saturation_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub duration_s: f64,
    pub settle_s: f64,
    pub ticks_per_second: u64,
    pub mass_kg: f64,
    pub omega0_rad_s: f64,
    pub gamma_per_s: f64,
    pub pressure_mbar: f64,
    pub stationary_temperature_k: f64,
    pub in_loop_fps: Option<f64>,
    pub out_of_loop_fps: Option<f64>,
    pub out_of_loop_estimators: Vec<String>,
    pub feedback: Option<FeedbackSummary>,
    pub estimator_failures_in_loop: u64,
    pub estimator_failures_out_of_loop: Vec<u64>,
    pub lost: Option<LossInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub metadata: Metadata,
    /// True state at the analysis camera's exposure midpoints.
    pub true_trace: Vec<TruePoint>,
    pub in_loop: Vec<PositionSample>,
    /// One trace per configured out-of-loop estimator.
    pub out_of_loop: Vec<Vec<PositionSample>>,
    pub telemetry: Vec<Actuation>,
    pub frames: Vec<Frame>,
}

impl RunArtifacts {
    pub fn lost(&self) -> bool {
        self.metadata.lost.is_some()
    }
}

/// SHA-256 of the resolved configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let repr = format!(
        "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
        cfg.run, cfg.particle, cfg.trap, cfg.environment, cfg.in_loop, cfg.out_of_loop, cfg.feedback,
        cfg.analysis
    );
    hex::encode(Sha256::digest(repr.as_bytes()))
}

/// One camera's frame schedule and estimator chain.
struct CameraRun<'a> {
    setup: &'a CameraSetup,
    calib: PixelCalibration,
    /// Sorted event offsets from the midpoint with (is blur sample, is midpoint).
    events: Vec<(f64, bool, bool)>,
    frame: u64,
    event: usize,
    blur: Vec<f64>,
    shot: ChaCha8Rng,
    read: ChaCha8Rng,
    frames_kept: usize,
}

impl<'a> CameraRun<'a> {
    fn new(setup: &'a CameraSetup, seed: u64, shot: Stream, read: Stream) -> Self {
        let offsets = setup.motion_blur.sample_offsets(setup.model.exposure_time());
        let mut events: Vec<(f64, bool, bool)> = offsets.iter().map(|&o| (o, true, o == 0.0)).collect();
        if !events.iter().any(|e| e.2) {
            events.push((0.0, false, true));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        CameraRun {
            setup,
            calib: PixelCalibration::from_camera(&setup.model),
            events,
            frame: 0,
            event: 0,
            blur: Vec::with_capacity(offsets.len()),
            shot: stream_rng(seed, shot),
            read: stream_rng(seed, read),
            frames_kept: 0,
        }
    }

    fn t_mid(&self, clock: &LoopClock) -> f64 {
        clock.frame_midpoint(self.setup.model.fps, self.frame, self.setup.model.exposure)
    }

    fn next_time(&self, clock: &LoopClock) -> f64 {
        self.t_mid(clock) + self.events[self.event].0
    }
}

enum CameraEvent {
    None,
    Midpoint(f64),
}

impl CameraRun<'_> {
    /// Handles the pending event at the current state; returns a rendered
    /// frame when the exposure completes.
    fn fire(&mut self, clock: &LoopClock, state: &ParticleState) -> Result<(CameraEvent, Option<Frame>)> {
        let (_, blur_sample, mid) = self.events[self.event];
        let t_mid = self.t_mid(clock);
        if blur_sample {
            self.blur.push(state.z);
        }
        let midpoint = if mid { CameraEvent::Midpoint(t_mid) } else { CameraEvent::None };
        self.event += 1;
        if self.event < self.events.len() {
            return Ok((midpoint, None));
        }
        let z = self.setup.motion_blur.effective_position(&self.blur);
        self.blur.clear();
        self.event = 0;
        self.frame += 1;
        let frame = render_frame(
            z,
            t_mid,
            &self.setup.model,
            NoiseStreams {
                shot: &mut self.shot,
                read: &mut self.read,
            },
        )?;
        Ok((midpoint, Some(frame)))
    }
}

fn feedback_summary(cfg: &ExperimentConfig, fb: &FeedbackConfig, plant: &Plant) -> Result<FeedbackSummary> {
    let rate = cfg.loop_rate().expect("feedback implies an in-loop camera");
    let timing = LoopTiming { fps: rate };
    let budget = phase_budget(fb, plant.omega0, &timing)?;
    Ok(FeedbackSummary {
        coarse_delay_frames: fb.coarse_delay_frames,
        fine_delay_s: fb.fine_delay,
        delay_phase_deg: budget.delay_deg,
        filter_cutoff_hz: fb.filter.cutoff_hz,
        filter_phase_deg: budget.filter_deg,
        total_phase_deg: budget.total_deg().rem_euclid(360.0),
        force_coeff_n_per_v: fb.force_coeff,
        predicted_damping_per_s: predicted_effective_damping(fb, plant.mass, plant.omega0, &timing)?,
        saturation_count: 0,
    })
}

/// Runs one experiment. A particle leaving a camera's field of view ends
/// the run early; the partial artifacts carry the loss in their metadata.
pub fn run_closed_loop(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let seed = cfg.run.seed;
    let plant = Plant::new(&cfg.particle, &cfg.trap, &cfg.environment)?;
    let mass = plant.mass;
    let psd_thermal = thermal_force_psd(plant.gamma, mass, cfg.environment.bath_temperature);
    let psd_excess = cfg.environment.excess_force_psd;
    let t_stat = stationary_temperature(&cfg.environment, plant.gamma, mass);

    // The in-loop camera only exists to close the loop.
    let loop_camera = cfg.in_loop.as_ref().filter(|_| cfg.feedback.enabled);
    let fb_cfg = match loop_camera {
        Some(_) => Some(cfg.feedback_config()?),
        None => None,
    };
    let mut controller = match (&fb_cfg, loop_camera) {
        (Some(fb), Some(cam)) => Some(Controller::new(*fb, cam.model.fps.hz())?),
        _ => None,
    };

    let mut rates = Vec::new();
    if let Some(c) = loop_camera {
        rates.push(c.model.fps);
    }
    if let Some(c) = &cfg.out_of_loop {
        rates.push(c.model.fps);
    }
    if rates.is_empty() {
        return Err(Error::config(
            "nothing to record: feedback is off and no out-of-loop camera is configured",
        ));
    }
    let clock = LoopClock::new(&rates)?;

    let mut inl = loop_camera.map(|s| CameraRun::new(s, seed, Stream::InLoopShot, Stream::InLoopRead));
    let mut ool = cfg
        .out_of_loop
        .as_ref()
        .map(|s| CameraRun::new(s, seed, Stream::OutOfLoopShot, Stream::OutOfLoopRead));
    let primary = if ool.is_some() { CameraLabel::OutOfLoop } else { CameraLabel::InLoop };

    let mut rng_thermal = stream_rng(seed, Stream::Thermal);
    let mut rng_excess = stream_rng(seed, Stream::Excess);
    let mut rng_init = stream_rng(seed, Stream::Init);
    let mut state = thermal_init(mass, plant.omega0, t_stat, &mut rng_init);

    let fastest_period = rates.iter().map(|r| r.period()).fold(f64::INFINITY, f64::min);
    let loop_period = loop_camera.map_or(fastest_period, |c| c.model.fps.period());
    let dt_max = loop_period / cfg.run.physics_substeps_per_frame as f64;
    let duration = cfg.run.duration_s;
    let latency = fb_cfg.as_ref().map_or(0.0, |f| f.processing_latency);

    let n_ool = cfg.out_of_loop.as_ref().map_or(0, |c| c.estimators.len());
    let mut art = RunArtifacts {
        metadata: Metadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: config_hash(cfg),
            duration_s: duration,
            settle_s: cfg.run.settle_s,
            ticks_per_second: clock.ticks_per_second(),
            mass_kg: mass,
            omega0_rad_s: plant.omega0,
            gamma_per_s: plant.gamma,
            pressure_mbar: cfg.environment.pressure_mbar,
            stationary_temperature_k: t_stat,
            in_loop_fps: loop_camera.map(|c| c.model.fps.hz()),
            out_of_loop_fps: cfg.out_of_loop.as_ref().map(|c| c.model.fps.hz()),
            out_of_loop_estimators: cfg
                .out_of_loop
                .as_ref()
                .map_or(Vec::new(), |c| c.estimators.iter().map(|e| e.tag()).collect()),
            feedback: match &fb_cfg {
                Some(fb) => Some(feedback_summary(cfg, fb, &plant)?),
                None => None,
            },
            estimator_failures_in_loop: 0,
            estimator_failures_out_of_loop: vec![0; n_ool],
            lost: None,
        },
        true_trace: Vec::new(),
        in_loop: Vec::new(),
        out_of_loop: vec![Vec::new(); n_ool],
        telemetry: Vec::new(),
        frames: Vec::new(),
    };

    let mut force = 0.0;
    let mut pending: VecDeque<(f64, f64)> = VecDeque::new();
    let mut last_loop_z = 0.0;

    'outer: while state.t < duration {
        let mut t_next = (state.t + dt_max).min(duration);
        if let Some(c) = &inl {
            t_next = t_next.min(c.next_time(&clock));
        }
        if let Some(c) = &ool {
            t_next = t_next.min(c.next_time(&clock));
        }
        if let Some(&(ta, _)) = pending.front() {
            t_next = t_next.min(ta);
        }
        let dt = t_next - state.t;
        if dt > 0.0 {
            let prop = Propagator::new(plant.omega0, plant.gamma, dt);
            let mut next = prop.mean(&state, force, mass);
            let (dz, dv) = prop.noise(psd_thermal, mass, &mut rng_thermal);
            let (ez, ev) = prop.noise(psd_excess, mass, &mut rng_excess);
            next.z += dz + ez;
            next.v += dv + ev;
            next.t = t_next;
            if !next.is_finite() {
                return Err(Error::IntegrationFault { t: state.t });
            }
            state = next;
        }
        let t = state.t;

        for label in [CameraLabel::OutOfLoop, CameraLabel::InLoop] {
            let run = match label {
                CameraLabel::InLoop => inl.as_mut(),
                CameraLabel::OutOfLoop => ool.as_mut(),
            };
            let Some(cam) = run else { continue };
            while cam.next_time(&clock) <= t {
                let (mid, frame) = match cam.fire(&clock, &state) {
                    Ok(x) => x,
                    Err(Error::ParticleLost {
                        camera, t, center_px, ..
                    }) => {
                        art.metadata.lost = Some(LossInfo { camera, t, center_px });
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                if let (CameraEvent::Midpoint(tm), true) = (&mid, label == primary) {
                    art.true_trace.push(TruePoint {
                        t: *tm,
                        z: state.z,
                        v: state.v,
                    });
                }
                let Some(frame) = frame else { continue };
                if cam.frames_kept < cfg.output.frames {
                    cam.frames_kept += 1;
                    art.frames.push(frame.clone());
                }
                match label {
                    CameraLabel::OutOfLoop => {
                        for (i, est) in cam.setup.estimators.iter().enumerate() {
                            let sample = match localize(&frame, est, &cam.calib) {
                                Ok(s) => s,
                                Err(_) => {
                                    art.metadata.estimator_failures_out_of_loop[i] += 1;
                                    PositionSample {
                                        z_est: f64::NAN,
                                        x_est: f64::NAN,
                                        t: frame.t_mid,
                                        estimator: *est,
                                        quality: 0.0,
                                    }
                                }
                            };
                            art.out_of_loop[i].push(sample);
                        }
                    }
                    CameraLabel::InLoop => {
                        let est = &cam.setup.estimators[0];
                        let sample = match localize(&frame, est, &cam.calib) {
                            Ok(s) => {
                                last_loop_z = s.z_est;
                                s
                            }
                            Err(_) => {
                                // the controller holds the last good estimate
                                art.metadata.estimator_failures_in_loop += 1;
                                PositionSample {
                                    z_est: last_loop_z,
                                    x_est: f64::NAN,
                                    t: frame.t_mid,
                                    estimator: *est,
                                    quality: 0.0,
                                }
                            }
                        };
                        art.in_loop.push(sample);
                        if let Some(ctl) = controller.as_mut() {
                            let act = ctl.process(&sample)?;
                            let t_act = (act.t_emit + latency).max(t);
                            pending.push_back((t_act, act.volts));
                            art.telemetry.push(act);
                        }
                    }
                }
            }
        }

        while let Some(&(ta, volts)) = pending.front() {
            if ta > t {
                break;
            }
            pending.pop_front();
            if let Some(fb) = &fb_cfg {
                force = force_on_particle(volts, fb);
            }
        }
    }

    if let (Some(fb), Some(ctl)) = (art.metadata.feedback.as_mut(), controller.as_ref()) {
        fb.saturation_count = ctl.saturation_count();
    }
    Ok(art)
}
