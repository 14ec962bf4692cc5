//! `levicool` command-line interface.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime
//! failure, 3 particle lost.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use levicool::harness::artifacts::{analyze_run_dir, write_run_dir};
use levicool::harness::config::parse_estimator;
use levicool::harness::sweep::{analyze_sweep_dir, run_sweep, worker_count, Axis, SweepOutcome, Variant};
use levicool::harness::tools::{run_bench, run_pixel_calibration};
use levicool::harness::{run_closed_loop, ExperimentConfig};
use levicool::imaging::CameraLabel;
use levicool::localization::{bench_csv, BackgroundPolicy};
use levicool::Error;

#[derive(Parser)]
#[command(name = "levicool", version, about = "Camera-based feedback cooling simulator for a trapped particle")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write a run directory.
    Simulate {
        config: PathBuf,
        /// Output directory (default: [output] dir of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run length, s.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Sweep one parameter with paired seeds and write curve tables.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze a run directory or re-summarize a sweep directory.
    Analyze { run_dir: PathBuf },
    /// Derive the pixel scale from a known translation of synthetic frames.
    CalibratePixels {
        /// Camera parameters from this config (default: built-in cameras).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CameraArg::OutOfLoop)]
        camera: CameraArg,
        /// Translation in pixels of the nominal scale.
        #[arg(long, default_value_t = 6.0)]
        shift_px: f64,
        /// Frames per position.
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Time and score every estimator on synthetic frames.
    BenchEstimators {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CameraArg::OutOfLoop)]
        camera: CameraArg,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        /// Timing passes per estimator; the fastest is kept.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration.
    Validate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Phase,
    Gain,
    Pressure,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Phase => Axis::Phase,
            AxisArg::Gain => Axis::Gain,
            AxisArg::Pressure => Axis::Pressure,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CameraArg {
    InLoop,
    OutOfLoop,
}

enum Failure {
    Config(String),
    Runtime(String),
    Lost(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::Parse(_) => Failure::Config(e.to_string()),
            Error::ParticleLost { .. } => Failure::Lost(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            duration,
        } => simulate(&config, out, seed, duration),
        Command::Sweep { config, axis, out } => sweep(&config, axis.into(), out),
        Command::Analyze { run_dir } => analyze(&run_dir),
        Command::CalibratePixels {
            config,
            camera,
            shift_px,
            frames,
            seed,
        } => calibrate(config.as_deref(), camera, shift_px, frames, seed),
        Command::BenchEstimators {
            config,
            camera,
            frames,
            repeats,
            seed,
            out,
        } => bench(config.as_deref(), camera, frames, repeats, seed, out.as_deref()),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Lost(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

fn simulate(path: &Path, out: Option<PathBuf>, seed: Option<u64>, duration: Option<f64>) -> CliResult {
    let mut cfg = load(path)?;
    if seed.is_some() || duration.is_some() {
        let mut file = cfg.file.clone();
        if let Some(s) = seed {
            file.run.seed = s;
        }
        if let Some(d) = duration {
            file.run.duration_s = d;
        }
        cfg = file.resolve()?;
    }
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    info!("simulating {} s, seed {}", cfg.run.duration_s, cfg.run.seed);
    let art = run_closed_loop(&cfg)?;
    write_run_dir(&dir, &cfg, &art)?;
    println!("run directory: {}", dir.display());
    println!("true samples: {}", art.true_trace.len());
    if !art.in_loop.is_empty() {
        println!("in-loop samples: {}", art.in_loop.len());
    }
    if let Some(t) = art.out_of_loop.first() {
        println!("out-of-loop samples: {}", t.len());
    }
    if let Some(fb) = &art.metadata.feedback {
        println!(
            "feedback: {} frames + {:.3} ms delay, predicted damping {:.4} 1/s, {} saturated outputs",
            fb.coarse_delay_frames,
            fb.fine_delay_s * 1e3,
            fb.predicted_damping_per_s,
            fb.saturation_count
        );
    }
    if let Some(lost) = &art.metadata.lost {
        return Err(Failure::Lost(format!(
            "particle lost from the {} camera at t = {} s; partial run written",
            lost.camera, lost.t
        )));
    }
    Ok(())
}

fn print_outcome(o: &SweepOutcome) {
    println!(
        "calibration: {:.6e} K/m^2 from {} references (spread {:.3})",
        o.calibration.coeff, o.calibration.n_references, o.calibration.spread
    );
    for (variant, curve) in &o.curves {
        println!("[{variant}]");
        println!("{:>14} {:>12}", "param", "t_eff_k");
        for r in &curve.rows {
            println!("{:>14.6e} {:>12.3}", r.param, r.t_eff);
        }
        println!(
            "min {:.3} K at {:.6e}; max {:.3} K at {:.6e}",
            curve.t_min, curve.rows[curve.argmin].param, curve.t_max, curve.rows[curve.argmax].param
        );
    }
    if let Some(t) = o.feedback_off_reference() {
        if o.curve(Variant::FeedbackOff).is_some_and(|c| c.rows.len() > 1) {
            println!("feedback-off mean: {t:.3} K");
        }
    }
}

fn sweep(path: &Path, axis: Axis, out: Option<PathBuf>) -> CliResult {
    let cfg = load(path)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    info!("sweeping {axis} with {} workers", worker_count(&cfg));
    let outcome = run_sweep(&cfg, axis, Some(&dir))?;
    print_outcome(&outcome);
    println!("sweep directory: {}", dir.display());
    let failed = outcome
        .records
        .iter()
        .filter(|r| r.status != levicool::harness::sweep::RunStatus::Ok)
        .count();
    if failed > 0 {
        eprintln!("warning: {failed} runs failed or lost the particle; see runs.csv");
    }
    Ok(())
}

fn analyze(dir: &Path) -> CliResult {
    if !dir.is_dir() {
        return Err(Failure::Config(format!("{} is not a directory", dir.display())));
    }
    if dir.join("sweep_meta.json").exists() {
        let outcome = analyze_sweep_dir(dir)?;
        print_outcome(&outcome);
        return Ok(());
    }
    let a = analyze_run_dir(dir)?;
    println!("samples: {} ({} filled)", a.n_samples, a.n_filled);
    println!("center: {:.4} Hz", a.peak.fit.center_hz);
    println!("fwhm: {:.4} Hz", a.peak.fit.fwhm_hz);
    println!("band: {:.3}..{:.3} Hz", a.peak.band.lo, a.peak.band.hi);
    println!("area: {:.6e} m^2", a.peak.area);
    println!("t_mass: {:.3} K", a.t_mass);
    Ok(())
}

fn camera_for(config: Option<&Path>, which: CameraArg) -> Result<ExperimentConfig, Failure> {
    let cfg = match config {
        Some(p) => load(p)?,
        None => ExperimentConfig::default_experiment(),
    };
    let label = match which {
        CameraArg::InLoop => CameraLabel::InLoop,
        CameraArg::OutOfLoop => CameraLabel::OutOfLoop,
    };
    if cfg.camera(label).is_none() {
        return Err(Failure::Config(format!("config has no {label} camera")));
    }
    Ok(cfg)
}

fn label(which: CameraArg) -> CameraLabel {
    match which {
        CameraArg::InLoop => CameraLabel::InLoop,
        CameraArg::OutOfLoop => CameraLabel::OutOfLoop,
    }
}

fn calibrate(config: Option<&Path>, which: CameraArg, shift_px: f64, frames: usize, seed: u64) -> CliResult {
    let cfg = camera_for(config, which)?;
    let cam = &cfg.camera(label(which)).expect("checked").model;
    if frames == 0 || !shift_px.is_finite() {
        return Err(Failure::Config("frames must be > 0 and shift finite".into()));
    }
    let nominal = cam.meters_per_pixel();
    let c = run_pixel_calibration(cam, shift_px * nominal, frames, seed)?;
    println!("nominal: {nominal:.6e} m/px");
    println!("measured: {:.6e} m/px", c.meters_per_pixel);
    println!("relative error: {:+.3e}", c.meters_per_pixel / nominal - 1.0);
    println!("origin: ({:.4}, {:.4}) px", c.origin_px.0, c.origin_px.1);
    Ok(())
}

fn bench(
    config: Option<&Path>,
    which: CameraArg,
    frames: usize,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult {
    let cfg = camera_for(config, which)?;
    let cam = &cfg.camera(label(which)).expect("checked").model;
    let estimators = [
        parse_estimator("peak", 1, BackgroundPolicy::BorderMedian)?,
        parse_estimator("centroid", 1, BackgroundPolicy::BorderMedian)?,
        parse_estimator("gaussian_fit", 1, BackgroundPolicy::BorderMedian)?,
    ];
    let rows = run_bench(cam, &estimators, frames, repeats, seed)?;
    println!(
        "{:<14} {:>14} {:>14} {:>10} {:>9}",
        "estimator", "rms_error_m", "cost_s", "vs_peak", "failures"
    );
    for r in &rows {
        println!(
            "{:<14} {:>14.4e} {:>14.4e} {:>10.2} {:>9}",
            r.estimator, r.rms_error_m, r.mean_cost_s, r.cost_ratio_vs_peak, r.failures
        );
    }
    if let Some(p) = out {
        std::fs::write(p, bench_csv(&rows)).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn validate(path: &Path) -> CliResult {
    let cfg = load(path)?;
    println!("{}: ok", path.display());
    println!("mass: {:.4e} kg", cfg.mass());
    println!("gas damping: {:.4e} 1/s", cfg.gas_damping()?);
    if let Some(rate) = cfg.loop_rate() {
        let fb = cfg.feedback_config()?;
        println!(
            "loop: {rate} fps, delay {} frames + {:.4} ms, filter cutoff {:.3} Hz",
            fb.coarse_delay_frames,
            fb.fine_delay * 1e3,
            fb.filter.cutoff_hz
        );
    }
    Ok(())
}
