//! Parameter sweeps over delay phase, gain or pressure.
//!
//! Every grid point is run with the same seed family (paired comparison).
//! Temperatures come from PSD areas through a calibration coefficient fixed
//! by feedback-off reference runs at `analysis.reference_pressure_mbar`,
//! which use their own seeds. A failing run is recorded and skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{calibrate_temperature, sweep_summary, Calibration, SweepRow, SweepSummary};
use crate::feedback::{predicted_effective_damping, LoopTiming};
use crate::harness::artifacts::{analyze_artifacts, write_run_dir};
use crate::harness::config::{ExperimentConfig, GridSpec};
use crate::harness::engine::run_closed_loop;
use crate::{Error, Result};

/// Seed offset of the calibration reference family.
pub const REFERENCE_SEED_OFFSET: u64 = 1_000_000;

pub const WORKERS_ENV: &str = "LEVICOOL_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Phase,
    Gain,
    Pressure,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Phase => "phase",
            Axis::Gain => "gain",
            Axis::Pressure => "pressure",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase" => Ok(Axis::Phase),
            "gain" => Ok(Axis::Gain),
            "pressure" => Ok(Axis::Pressure),
            other => Err(Error::config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FeedbackOn,
    FeedbackOff,
    /// Feedback on, both cameras noiseless.
    Noiseless,
    Reference,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::FeedbackOn => "feedback-on",
            Variant::FeedbackOff => "feedback-off",
            Variant::Noiseless => "noiseless",
            Variant::Reference => "reference",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedback-on" => Ok(Variant::FeedbackOn),
            "feedback-off" => Ok(Variant::FeedbackOff),
            "noiseless" => Ok(Variant::Noiseless),
            "reference" => Ok(Variant::Reference),
            other => Err(Error::Parse(format!("unknown run variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Lost,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Lost => "lost",
            RunStatus::Failed => "failed",
        })
    }
}

/// One simulated run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Grid index; `None` for runs shared by all points.
    pub point: Option<usize>,
    pub param: f64,
    pub variant: Variant,
    pub seed: u64,
    pub status: RunStatus,
    pub area_m2: f64,
    pub omega_cm_rad_s: f64,
    pub fwhm_hz: f64,
    pub t_mass_k: f64,
    pub predicted_damping_per_s: f64,
    pub error: String,
}

const RUNS_HEADER: &str =
    "point,param,variant,seed,status,area_m2,omega_cm_rad_s,fwhm_hz,t_mass_k,predicted_damping_per_s,error";

pub fn write_runs_csv(records: &[RunRecord]) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.point.map_or(String::new(), |p| p.to_string()),
            r.param,
            r.variant,
            r.seed,
            r.status,
            r.area_m2,
            r.omega_cm_rad_s,
            r.fwhm_hz,
            r.t_mass_k,
            r.predicted_damping_per_s,
            r.error.replace([',', '\n'], ";")
        ));
    }
    out
}

pub fn read_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RUNS_HEADER) {
        return Err(Error::Parse("runs CSV: unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.splitn(11, ',').collect();
            if f.len() != 11 {
                return Err(Error::Parse(format!("runs CSV row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{l:?}: {e}")));
            Ok(RunRecord {
                point: if f[0].is_empty() {
                    None
                } else {
                    Some(f[0].parse().map_err(|e| Error::Parse(format!("{l:?}: {e}")))?)
                },
                param: num(f[1])?,
                variant: f[2].parse()?,
                seed: f[3].parse().map_err(|e| Error::Parse(format!("{l:?}: {e}")))?,
                status: match f[4] {
                    "ok" => RunStatus::Ok,
                    "lost" => RunStatus::Lost,
                    "failed" => RunStatus::Failed,
                    s => return Err(Error::Parse(format!("unknown status {s:?}"))),
                },
                area_m2: num(f[5])?,
                omega_cm_rad_s: num(f[6])?,
                fwhm_hz: num(f[7])?,
                t_mass_k: num(f[8])?,
                predicted_damping_per_s: num(f[9])?,
                error: f[10].to_string(),
            })
        })
        .collect()
}

/// Worker count: `LEVICOOL_WORKERS`, else `sweep.workers`, else all cores.
pub fn worker_count(cfg: &ExperimentConfig) -> usize {
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        return n;
    }
    if cfg.sweep.workers > 0 {
        return cfg.sweep.workers;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn grid(cfg: &ExperimentConfig, axis: Axis) -> Result<Vec<f64>> {
    let spec: Option<&GridSpec> = match axis {
        Axis::Phase => cfg.sweep.phase_deg.as_ref(),
        Axis::Gain => cfg.sweep.gain.as_ref(),
        Axis::Pressure => cfg.sweep.pressure_mbar.as_ref(),
    };
    spec.ok_or_else(|| Error::config(format!("no [sweep] grid for axis {axis}")))?
        .values()
}

/// Configuration of one sweep run.
pub fn point_config(
    base: &ExperimentConfig,
    axis: Axis,
    param: Option<f64>,
    variant: Variant,
    seed: u64,
) -> Result<ExperimentConfig> {
    let mut file = base.file.clone();
    file.run.seed = seed;
    if let Some(v) = param {
        match axis {
            Axis::Phase => {
                file.feedback.delay_phase_deg = Some(v);
                file.feedback.coarse_delay_frames = None;
                file.feedback.fine_delay_s = None;
            }
            Axis::Gain => file.feedback.gain = v,
            Axis::Pressure => file.environment.pressure_mbar = v,
        }
    }
    match variant {
        Variant::FeedbackOn => file.feedback.enabled = true,
        Variant::FeedbackOff => file.feedback.enabled = false,
        Variant::Noiseless => {
            file.feedback.enabled = true;
            for cam in [&mut file.camera.in_loop, &mut file.camera.out_of_loop]
                .into_iter()
                .flatten()
            {
                cam.detector_noise = Some(false);
            }
        }
        Variant::Reference => {
            file.feedback.enabled = false;
            file.environment.pressure_mbar = base.analysis.reference_pressure_mbar;
        }
    }
    file.resolve()
}

fn predicted_damping(cfg: &ExperimentConfig) -> f64 {
    if !cfg.feedback.enabled {
        return 0.0;
    }
    let (Ok(fb), Some(rate)) = (cfg.feedback_config(), cfg.loop_rate()) else {
        return f64::NAN;
    };
    predicted_effective_damping(&fb, cfg.mass(), cfg.trap.omega0, &LoopTiming { fps: rate })
        .unwrap_or(f64::NAN)
}

#[derive(Debug, Clone)]
struct Job {
    point: Option<usize>,
    param: f64,
    variant: Variant,
    seed: u64,
}

fn execute(base: &ExperimentConfig, axis: Axis, job: &Job, out_dir: Option<&Path>) -> RunRecord {
    let mut rec = RunRecord {
        point: job.point,
        param: job.param,
        variant: job.variant,
        seed: job.seed,
        status: RunStatus::Failed,
        area_m2: f64::NAN,
        omega_cm_rad_s: f64::NAN,
        fwhm_hz: f64::NAN,
        t_mass_k: f64::NAN,
        predicted_damping_per_s: f64::NAN,
        error: String::new(),
    };
    let param = job.point.map(|_| job.param);
    let cfg = match point_config(base, axis, param, job.variant, job.seed) {
        Ok(c) => c,
        Err(e) => {
            rec.error = e.to_string();
            return rec;
        }
    };
    rec.predicted_damping_per_s = predicted_damping(&cfg);
    let art = match run_closed_loop(&cfg) {
        Ok(a) => a,
        Err(e) => {
            rec.error = e.to_string();
            return rec;
        }
    };
    if let Some(dir) = out_dir.filter(|_| base.output.sweep_run_artifacts) {
        let name = format!(
            "{}_{}_{}",
            job.point.map_or("all".to_string(), |p| format!("{p:03}")),
            job.variant,
            job.seed
        );
        if let Err(e) = write_run_dir(&dir.join("runs").join(name), &cfg, &art) {
            log::warn!("could not write run artifacts: {e}");
        }
    }
    if let Some(loss) = art.metadata.lost {
        rec.status = RunStatus::Lost;
        rec.error = format!("particle lost from the {} camera at t = {} s", loss.camera, loss.t);
        return rec;
    }
    match analyze_artifacts(&art, &cfg) {
        Ok(a) => {
            rec.status = RunStatus::Ok;
            rec.area_m2 = a.peak.area;
            rec.omega_cm_rad_s = a.omega_cm;
            rec.fwhm_hz = a.peak.fit.fwhm_hz;
            rec.t_mass_k = a.t_mass;
        }
        Err(e) => rec.error = e.to_string(),
    }
    rec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub t_room_k: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub meta: SweepMeta,
    pub records: Vec<RunRecord>,
    pub references: Vec<RunRecord>,
    pub calibration: Calibration,
    /// Seed-averaged curve per variant.
    pub curves: BTreeMap<Variant, SweepSummary>,
    /// Predicted feedback damping per grid point (feedback-on configuration).
    pub predicted_damping: Vec<f64>,
}

impl SweepOutcome {
    pub fn curve(&self, v: Variant) -> Option<&SweepSummary> {
        self.curves.get(&v)
    }

    /// Mean temperature of the feedback-off runs shared by all points.
    pub fn feedback_off_reference(&self) -> Option<f64> {
        let c = self.curves.get(&Variant::FeedbackOff)?;
        let v: Vec<f64> = c.rows.iter().map(|r| r.t_eff).filter(|t| t.is_finite()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Calibrates and averages the records into curves.
pub fn summarize(meta: SweepMeta, records: Vec<RunRecord>, references: Vec<RunRecord>) -> Result<SweepOutcome> {
    let ref_areas: Vec<f64> = references
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .map(|r| r.area_m2)
        .collect();
    let calibration = calibrate_temperature(&ref_areas, meta.t_room_k)?;
    let mut curves = BTreeMap::new();
    let variants: Vec<Variant> = {
        let mut v: Vec<Variant> = records.iter().map(|r| r.variant).collect();
        v.sort();
        v.dedup();
        v
    };
    for variant in variants {
        let rows: Vec<SweepRow> = meta
            .grid
            .iter()
            .enumerate()
            .map(|(i, &param)| {
                let ok: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| {
                        r.variant == variant
                            && r.status == RunStatus::Ok
                            && r.point.is_none_or(|p| p == i)
                    })
                    .collect();
                let n = ok.len() as f64;
                let area = ok.iter().map(|r| r.area_m2).sum::<f64>() / n;
                SweepRow {
                    param,
                    area,
                    t_eff: calibration.coeff * area,
                    omega_cm: ok.iter().map(|r| r.omega_cm_rad_s).sum::<f64>() / n,
                }
            })
            .collect();
        curves.insert(variant, sweep_summary(&rows)?);
    }
    let predicted_damping = meta
        .grid
        .iter()
        .enumerate()
        .map(|(i, _)| {
            records
                .iter()
                .find(|r| r.variant == Variant::FeedbackOn && r.point == Some(i))
                .map_or(f64::NAN, |r| r.predicted_damping_per_s)
        })
        .collect();
    Ok(SweepOutcome {
        meta,
        records,
        references,
        calibration,
        curves,
        predicted_damping,
    })
}

/// Runs a sweep and, with `out_dir`, writes its tables there.
pub fn run_sweep(base: &ExperimentConfig, axis: Axis, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    let grid = grid(base, axis)?;
    let seeds: Vec<u64> = (0..base.sweep.seeds_per_point as u64)
        .map(|i| base.run.seed.wrapping_add(i))
        .collect();
    let mut jobs = Vec::new();
    for i in 0..base.analysis.reference_runs as u64 {
        jobs.push(Job {
            point: None,
            param: base.analysis.reference_pressure_mbar,
            variant: Variant::Reference,
            seed: base.run.seed.wrapping_add(REFERENCE_SEED_OFFSET + i),
        });
    }
    let mut variants = vec![Variant::FeedbackOn];
    if base.sweep.compare_noiseless {
        variants.push(Variant::Noiseless);
    }
    for (i, &param) in grid.iter().enumerate() {
        for &variant in &variants {
            for &seed in &seeds {
                jobs.push(Job {
                    point: Some(i),
                    param,
                    variant,
                    seed,
                });
            }
        }
    }
    if base.sweep.compare_feedback_off {
        if axis == Axis::Pressure {
            for (i, &param) in grid.iter().enumerate() {
                for &seed in &seeds {
                    jobs.push(Job {
                        point: Some(i),
                        param,
                        variant: Variant::FeedbackOff,
                        seed,
                    });
                }
            }
        } else {
            // phase and gain do not act with feedback off: one shared set
            for &seed in &seeds {
                jobs.push(Job {
                    point: None,
                    param: f64::NAN,
                    variant: Variant::FeedbackOff,
                    seed,
                });
            }
        }
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let workers = worker_count(base);
    log::info!("sweep {axis}: {} runs on {workers} workers", jobs.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let r = execute(base, axis, job, out_dir);
                log::debug!(
                    "{} {} seed {} -> {} {}",
                    job.variant,
                    job.param,
                    job.seed,
                    r.status,
                    r.error
                );
                r
            })
            .collect()
    });
    for r in results.iter().filter(|r| r.status != RunStatus::Ok) {
        log::warn!("{} run at {} (seed {}) {}: {}", r.variant, r.param, r.seed, r.status, r.error);
    }
    let (references, records): (Vec<RunRecord>, Vec<RunRecord>) =
        results.into_iter().partition(|r| r.variant == Variant::Reference);
    let meta = SweepMeta {
        axis,
        grid,
        t_room_k: base.analysis.t_room,
        seeds,
    };
    let outcome = summarize(meta, records, references)?;
    if let Some(dir) = out_dir {
        write_sweep_dir(dir, &outcome)?;
    }
    Ok(outcome)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `runs.csv`, `reference.csv`, `calibration.json`, `sweep_meta.json`,
/// `summary.json` and one curve CSV per variant (`sweep.csv` for feedback on).
pub fn write_sweep_dir(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("runs.csv"), write_runs_csv(&outcome.records))?;
    fs::write(dir.join("reference.csv"), write_runs_csv(&outcome.references))?;
    fs::write(dir.join("calibration.json"), json(&outcome.calibration)?)?;
    fs::write(dir.join("sweep_meta.json"), json(&outcome.meta)?)?;
    let mut summary = serde_json::Map::new();
    for (variant, curve) in &outcome.curves {
        let name = match variant {
            Variant::FeedbackOn => "sweep.csv".to_string(),
            v => format!("sweep_{}.csv", v.to_string().replace('-', "_")),
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        fs::write(dir.join(name), buf)?;
        summary.insert(
            variant.to_string(),
            serde_json::json!({
                "argmin_param": curve.rows[curve.argmin].param,
                "t_min_k": curve.t_min,
                "argmax_param": curve.rows[curve.argmax].param,
                "t_max_k": curve.t_max,
                "interior_minimum": curve.has_interior_minimum(),
                "monotone_nonincreasing": curve.is_monotone_nonincreasing(),
            }),
        );
    }
    summary.insert(
        "predicted_damping_per_s".into(),
        serde_json::json!(outcome.predicted_damping),
    );
    fs::write(dir.join("summary.json"), json(&summary)?)?;
    Ok(())
}

/// Recomputes calibration and curves from a sweep directory's run tables.
pub fn analyze_sweep_dir(dir: &Path) -> Result<SweepOutcome> {
    let meta: SweepMeta = serde_json::from_str(&fs::read_to_string(dir.join("sweep_meta.json"))?)
        .map_err(|e| Error::Parse(format!("sweep_meta.json: {e}")))?;
    let records = read_runs_csv(&fs::read_to_string(dir.join("runs.csv"))?)?;
    let references = read_runs_csv(&fs::read_to_string(dir.join("reference.csv"))?)?;
    let outcome = summarize(meta, records, references)?;
    write_sweep_dir(dir, &outcome)?;
    Ok(outcome)
}
