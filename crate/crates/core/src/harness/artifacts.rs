//! Run directories and per-run spectral analysis.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          copy of the input configuration
//! metadata.json        seed, config hash, version, derived physics, loss flag
//! true_trace.csv       t_s,z_true_m,v_true_m_s
//! in_loop.csv          t_s,z_est_m,x_est_m,estimator,quality
//! out_of_loop.csv      same columns, first out-of-loop estimator
//! out_of_loop_<tag>.csv  further out-of-loop estimators
//! telemetry.csv        controller stream
//! frames.bin           optional u16 frame dump, row-major; frames.csv indexes it
//! psd.csv, analysis.json  written by `analyze`
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{analyze_peak, welch_psd, Band, PeakAnalysis, Psd};
use crate::harness::config::ExperimentConfig;
use crate::harness::engine::{Metadata, RunArtifacts};
use crate::localization::PositionSample;
use crate::units::K_B;
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "t_s,z_est_m,x_est_m,estimator,quality";
pub const TRUE_HEADER: &str = "t_s,z_true_m,v_true_m_s";
pub const TELEMETRY_HEADER: &str = "tick,t_s,t_emit_s,raw_m,delayed_m,filtered_m,volts,saturated";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_samples(path: &Path, samples: &[PositionSample]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(w, "{},{},{},{},{}", s.t, s.z_est, s.x_est, s.estimator.tag(), s.quality)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every artifact of a run into `dir` (created if missing).
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, art: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&art.metadata).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;

    let mut w = create(&dir.join("true_trace.csv"))?;
    writeln!(w, "{TRUE_HEADER}")?;
    for p in &art.true_trace {
        writeln!(w, "{},{},{}", p.t, p.z, p.v)?;
    }
    w.flush()?;

    if !art.in_loop.is_empty() {
        write_samples(&dir.join("in_loop.csv"), &art.in_loop)?;
    }
    for (i, trace) in art.out_of_loop.iter().enumerate() {
        let name = if i == 0 {
            "out_of_loop.csv".to_string()
        } else {
            format!("out_of_loop_{}.csv", art.metadata.out_of_loop_estimators[i])
        };
        write_samples(&dir.join(name), trace)?;
    }

    if cfg.output.telemetry && !art.telemetry.is_empty() {
        let mut w = create(&dir.join("telemetry.csv"))?;
        writeln!(w, "{TELEMETRY_HEADER}")?;
        for a in &art.telemetry {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                a.tick, a.t, a.t_emit, a.raw, a.delayed, a.filtered, a.volts, a.saturated as u8
            )?;
        }
        w.flush()?;
    }

    if !art.frames.is_empty() {
        let mut bin = create(&dir.join("frames.bin"))?;
        let mut idx = create(&dir.join("frames.csv"))?;
        writeln!(idx, "index,camera,t_mid_s,width,height")?;
        for (i, f) in art.frames.iter().enumerate() {
            f.write_u16(&mut bin)?;
            writeln!(idx, "{i},{},{},{},{}", f.camera, f.t_mid, f.width, f.height)?;
        }
        bin.flush()?;
        idx.flush()?;
    }
    Ok(())
}

/// `(t, z)` columns of a position trace CSV.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let (mut t, mut z) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.is_empty()) {
        let mut it = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::Parse(format!("short row {line:?}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{line:?}: {e}")))
        };
        t.push(parse(it.next())?);
        z.push(parse(it.next())?);
    }
    Ok((t, z))
}

pub fn read_metadata(dir: &Path) -> Result<Metadata> {
    let text = fs::read_to_string(dir.join("metadata.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("metadata.json: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunAnalysis {
    #[serde(skip)]
    pub psd: Psd,
    pub peak: PeakAnalysis,
    pub omega_cm: f64,
    /// Mass-based temperature `m w_cm^2 area / k_B`, K.
    pub t_mass: f64,
    pub n_samples: usize,
    /// Samples whose estimator failed, replaced by the previous value.
    pub n_filled: usize,
}

/// Drops `t < settle`, fills failed (NaN) samples with the previous value
/// and runs the PSD and peak analysis.
pub fn analyze_trace(
    t: &[f64],
    z: &[f64],
    fs: f64,
    settle: f64,
    cfg: &ExperimentConfig,
    search: &Band,
) -> Result<RunAnalysis> {
    let mut trace = Vec::with_capacity(z.len());
    let mut n_filled = 0;
    let mut last = z.iter().copied().find(|v| v.is_finite());
    for (&ti, &zi) in t.iter().zip(z) {
        if ti < settle {
            if zi.is_finite() {
                last = Some(zi);
            }
            continue;
        }
        if zi.is_finite() {
            last = Some(zi);
            trace.push(zi);
        } else {
            n_filled += 1;
            trace.push(last.ok_or_else(|| Error::InsufficientData("no valid position samples".into()))?);
        }
    }
    let psd = welch_psd(&trace, fs, &cfg.analysis.welch)?;
    let peak = analyze_peak(&psd, search, &cfg.analysis.band)?;
    let omega_cm = 2.0 * std::f64::consts::PI * peak.fit.center_hz;
    Ok(RunAnalysis {
        t_mass: cfg.mass() * omega_cm * omega_cm * peak.area / K_B,
        psd,
        peak,
        omega_cm,
        n_samples: trace.len(),
        n_filled,
    })
}

/// Analyzes the analysis camera's primary trace of an in-memory run.
pub fn analyze_artifacts(art: &RunArtifacts, cfg: &ExperimentConfig) -> Result<RunAnalysis> {
    let (samples, fs) = match (art.out_of_loop.first(), art.metadata.out_of_loop_fps) {
        (Some(s), Some(fs)) => (s, fs),
        _ => (
            &art.in_loop,
            art.metadata
                .in_loop_fps
                .ok_or_else(|| Error::InsufficientData("run has no position trace".into()))?,
        ),
    };
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let z: Vec<f64> = samples.iter().map(|s| s.z_est).collect();
    analyze_trace(&t, &z, fs, cfg.run.settle_s, cfg, &cfg.search_band())
}

/// Analyzes a run directory and writes `psd.csv` and `analysis.json` into it.
pub fn analyze_run_dir(dir: &Path) -> Result<RunAnalysis> {
    let meta = read_metadata(dir)?;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let (path, fs) = match meta.out_of_loop_fps {
        Some(fs) => (dir.join("out_of_loop.csv"), fs),
        None => (
            dir.join("in_loop.csv"),
            meta.in_loop_fps
                .ok_or_else(|| Error::InsufficientData("run has no position trace".into()))?,
        ),
    };
    let (t, z) = read_trace_csv(&path)?;
    let result = analyze_trace(&t, &z, fs, meta.settle_s, &cfg, &cfg.search_band())?;
    let mut w = create(&dir.join("psd.csv"))?;
    result.psd.write_csv(&mut w)?;
    w.flush()?;
    fs::write(
        dir.join("analysis.json"),
        serde_json::to_string_pretty(&result).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    Ok(result)
}

/// Output directory for a run, relative paths resolved against `base`.
pub fn resolve_dir(base: Option<&Path>, dir: &Path) -> PathBuf {
    match base {
        Some(b) if dir.is_relative() => b.join(dir),
        _ => dir.to_path_buf(),
    }
}
