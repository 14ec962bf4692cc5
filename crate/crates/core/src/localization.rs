//! Position estimators: peak detection, power-weighted centroid and a 2-D
//! Gaussian least-squares fit, plus pixel-scale calibration.
//!
//! Pixel coordinates follow the frame layout: `x` is the column index,
//! `z` the row index, and pixel `(col, row)` is centered on the integer
//! coordinate `(col, row)`. [`PixelCalibration`] maps them to meters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::FitIterate;
use crate::imaging::{CameraModel, Frame};
use crate::lsq::{self, Model};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCalibration {
    /// Object-plane meters per pixel.
    pub meters_per_pixel: f64,
    /// Pixel coordinate `(x, z)` that maps to the origin.
    pub origin_px: (f64, f64),
}

impl PixelCalibration {
    pub fn new(meters_per_pixel: f64, origin_px: (f64, f64)) -> Result<Self> {
        if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
            return Err(Error::config(format!(
                "meters_per_pixel must be > 0, got {meters_per_pixel}"
            )));
        }
        Ok(PixelCalibration {
            meters_per_pixel,
            origin_px,
        })
    }

    /// Ideal calibration of a camera: pitch over magnification, ROI center at z = 0.
    pub fn from_camera(camera: &CameraModel) -> Self {
        PixelCalibration {
            meters_per_pixel: camera.meters_per_pixel(),
            origin_px: camera.center_px(),
        }
    }

    /// `(x, z)` in meters for a pixel coordinate.
    pub fn to_meters(&self, x_px: f64, z_px: f64) -> (f64, f64) {
        (
            (x_px - self.origin_px.0) * self.meters_per_pixel,
            (z_px - self.origin_px.1) * self.meters_per_pixel,
        )
    }
}

/// Background handling ahead of the centroid sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum BackgroundPolicy {
    #[default]
    None,
    /// Subtract the median of the border pixels, clamping at zero.
    BorderMedian,
    /// Zero every pixel below the threshold.
    Threshold(f64),
}

impl fmt::Display for BackgroundPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackgroundPolicy::None => f.write_str("none"),
            BackgroundPolicy::BorderMedian => f.write_str("border-median"),
            BackgroundPolicy::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for BackgroundPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(BackgroundPolicy::None),
            "border-median" => Ok(BackgroundPolicy::BorderMedian),
            other => other
                .strip_prefix("threshold:")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| t.is_finite())
                .map(BackgroundPolicy::Threshold)
                .ok_or_else(|| Error::config(format!("unknown background policy {other:?}"))),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the pixels on the ROI border.
pub fn border_median(frame: &Frame) -> f64 {
    let (w, h) = (frame.width, frame.height);
    let mut border = Vec::with_capacity(2 * (w + h));
    for col in 0..w {
        border.push(frame.at(0, col) as f64);
        border.push(frame.at(h - 1, col) as f64);
    }
    for row in 1..h - 1 {
        border.push(frame.at(row, 0) as f64);
        border.push(frame.at(row, w - 1) as f64);
    }
    median(&mut border)
}

/// Applies a background policy and returns the processed grid as reals.
pub fn background_policy(frame: &Frame, policy: BackgroundPolicy) -> Vec<f64> {
    match policy {
        BackgroundPolicy::None => frame.counts.iter().map(|&c| c as f64).collect(),
        BackgroundPolicy::BorderMedian => {
            let b = border_median(frame);
            frame
                .counts
                .iter()
                .map(|&c| (c as f64 - b).max(0.0))
                .collect()
        }
        BackgroundPolicy::Threshold(t) => frame
            .counts
            .iter()
            .map(|&c| if (c as f64) < t { 0.0 } else { c as f64 })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Peak,
    Centroid {
        power: u32,
        background: BackgroundPolicy,
    },
    GaussianFit,
}

impl Estimator {
    /// Short tag used in traces, e.g. `centroid_p3`.
    pub fn tag(&self) -> String {
        match self {
            Estimator::Peak => "peak".into(),
            Estimator::Centroid { power, .. } => format!("centroid_p{power}"),
            Estimator::GaussianFit => "gaussian_fit".into(),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionSample {
    /// Axial estimate, m.
    pub z_est: f64,
    /// Transverse estimate, m.
    pub x_est: f64,
    /// Exposure midpoint, s.
    pub t: f64,
    pub estimator: Estimator,
    /// Total signal counts entering the estimate.
    pub quality: f64,
}

/// Brightest pixel; ties go to the first pixel in row-major order.
pub fn peak_detect(frame: &Frame, calib: &PixelCalibration) -> Result<PositionSample> {
    let first = *frame
        .counts
        .first()
        .ok_or(Error::LowSignal("peak detection on an empty frame"))?;
    let mut best = (0usize, first);
    let mut all_equal = true;
    for (i, &c) in frame.counts.iter().enumerate().skip(1) {
        if c != first {
            all_equal = false;
        }
        if c > best.1 {
            best = (i, c);
        }
    }
    if all_equal {
        return Err(Error::LowSignal("peak detection on a flat frame"));
    }
    let (row, col) = (best.0 / frame.width, best.0 % frame.width);
    let (x_est, z_est) = calib.to_meters(col as f64, row as f64);
    Ok(PositionSample {
        z_est,
        x_est,
        t: frame.t_mid,
        estimator: Estimator::Peak,
        quality: best.1 as f64,
    })
}

/// Power-weighted centroid of a row-major grid in pixel units:
/// `(sum I^p * col, sum I^p * row) / sum I^p`. Returns `(x, z, sum I)`.
pub fn centroid_px(grid: &[f64], width: usize, power: u32) -> Option<(f64, f64, f64)> {
    let (mut sw, mut sx, mut sz, mut signal) = (0.0, 0.0, 0.0, 0.0);
    for (row, line) in grid.chunks(width).enumerate() {
        let mut row_w = 0.0;
        for (col, &v) in line.iter().enumerate() {
            let w = match power {
                1 => v,
                2 => v * v,
                3 => v * v * v,
                p => v.powi(p as i32),
            };
            row_w += w;
            sx += w * col as f64;
            signal += v;
        }
        sw += row_w;
        sz += row_w * row as f64;
    }
    if sw > 0.0 && sw.is_finite() {
        Some((sx / sw, sz / sw, signal))
    } else {
        None
    }
}

pub fn centroid(
    frame: &Frame,
    power: u32,
    calib: &PixelCalibration,
    background: BackgroundPolicy,
) -> Result<PositionSample> {
    if power == 0 {
        return Err(Error::config("centroid power must be a positive integer"));
    }
    let grid = background_policy(frame, background);
    let (x_px, z_px, signal) =
        centroid_px(&grid, frame.width, power).ok_or(Error::LowSignal("centroid"))?;
    let (x_est, z_est) = calib.to_meters(x_px, z_px);
    Ok(PositionSample {
        z_est,
        x_est,
        t: frame.t_mid,
        estimator: Estimator::Centroid { power, background },
        quality: signal,
    })
}

/// Isotropic 2-D Gaussian plus offset, fitted to raw counts.
struct GaussianModel<'a> {
    counts: &'a [u32],
    width: usize,
}

impl Model for GaussianModel<'_> {
    fn n_params(&self) -> usize {
        5
    }

    fn n_residuals(&self) -> usize {
        self.counts.len()
    }

    // params: amplitude, x0, z0, sigma, offset
    fn evaluate(&self, p: &[f64], r: &mut [f64], jac: &mut [f64]) {
        let (a, x0, z0, s, b) = (p[0], p[1], p[2], p[3], p[4]);
        let inv_s2 = 1.0 / (s * s);
        for (k, &c) in self.counts.iter().enumerate() {
            let dx = (k % self.width) as f64 - x0;
            let dz = (k / self.width) as f64 - z0;
            let r2 = dx * dx + dz * dz;
            let e = (-0.5 * r2 * inv_s2).exp();
            let ae = a * e;
            r[k] = ae + b - c as f64;
            let j = &mut jac[5 * k..5 * k + 5];
            j[0] = e;
            j[1] = ae * dx * inv_s2;
            j[2] = ae * dz * inv_s2;
            j[3] = ae * r2 * inv_s2 / s;
            j[4] = 1.0;
        }
    }

    fn admissible(&self, p: &[f64]) -> bool {
        p[3] > 0.0 && p.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub sample: PositionSample,
    pub sigma_px: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub iterations: usize,
}

/// Sigma below which a fit is reported as degenerate, px.
pub const MIN_FIT_SIGMA_PX: f64 = 0.3;

/// Least-squares Gaussian fit, initialized from the background-subtracted
/// centroid unless `init_px` is given.
pub fn gaussian_fit(
    frame: &Frame,
    calib: &PixelCalibration,
    init_px: Option<(f64, f64)>,
) -> Result<GaussianFit> {
    let offset0 = border_median(frame);
    let grid = background_policy(frame, BackgroundPolicy::BorderMedian);
    let (cx, cz, signal) = centroid_px(&grid, frame.width, 1).ok_or(Error::LowSignal("gaussian fit"))?;
    let (x0, z0) = init_px.unwrap_or((cx, cz));
    let peak = grid.iter().cloned().fold(0.0, f64::max);
    // Sigma from the integrated signal over the peak height of a 2-D Gaussian.
    let sigma0 = (signal / (2.0 * std::f64::consts::PI * peak)).sqrt().clamp(0.7, 5.0);
    let model = GaussianModel {
        counts: &frame.counts,
        width: frame.width,
    };
    let out = lsq::solve(&model, &[peak, x0, z0, sigma0, offset0], lsq::Settings::default());
    let p = &out.params;
    if !out.converged {
        return Err(Error::FitFailed {
            iterations: out.iterations,
            best: FitIterate {
                amplitude: p[0],
                x0_px: p[1],
                z0_px: p[2],
                sigma_px: p[3],
                offset: p[4],
            },
        });
    }
    if p[3] < MIN_FIT_SIGMA_PX {
        return Err(Error::DegenerateFit { sigma_px: p[3] });
    }
    let (x_est, z_est) = calib.to_meters(p[1], p[2]);
    Ok(GaussianFit {
        sample: PositionSample {
            z_est,
            x_est,
            t: frame.t_mid,
            estimator: Estimator::GaussianFit,
            quality: 2.0 * std::f64::consts::PI * p[0] * p[3] * p[3],
        },
        sigma_px: p[3],
        amplitude: p[0],
        offset: p[4],
        iterations: out.iterations,
    })
}

/// Runs one estimator on a frame.
pub fn localize(frame: &Frame, estimator: &Estimator, calib: &PixelCalibration) -> Result<PositionSample> {
    match *estimator {
        Estimator::Peak => peak_detect(frame, calib),
        Estimator::Centroid { power, background } => centroid(frame, power, calib, background),
        Estimator::GaussianFit => gaussian_fit(frame, calib, None).map(|f| f.sample),
    }
}

/// Half-size of the window used by [`calibrate_pixels`], px.
pub const CALIBRATION_WINDOW_PX: usize = 8;

/// Mean background-subtracted image of a set of frames, without clamping.
fn mean_image(frames: &[Frame]) -> Result<(Vec<f64>, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("no calibration frames".into()))?;
    let (w, h) = (first.width, first.height);
    let mut acc = vec![0.0; w * h];
    for f in frames {
        if (f.width, f.height) != (w, h) {
            return Err(Error::InsufficientData("calibration frames differ in size".into()));
        }
        let b = border_median(f);
        for (a, &c) in acc.iter_mut().zip(&f.counts) {
            *a += c as f64 - b;
        }
    }
    let n = frames.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok((acc, w))
}

/// p = 1 centroid of `grid` over a square window around its brightest pixel.
fn window_centroid(grid: &[f64], width: usize) -> Result<(f64, f64)> {
    let height = grid.len() / width;
    let k = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .ok_or(Error::LowSignal("calibration frame"))?;
    let (r0, c0) = (k / width, k % width);
    let rows = r0.saturating_sub(CALIBRATION_WINDOW_PX)..(r0 + CALIBRATION_WINDOW_PX + 1).min(height);
    let cols = c0.saturating_sub(CALIBRATION_WINDOW_PX)..(c0 + CALIBRATION_WINDOW_PX + 1).min(width);
    let (mut s, mut sx, mut sz) = (0.0, 0.0, 0.0);
    for r in rows {
        for c in cols.clone() {
            let v = grid[r * width + c];
            s += v;
            sx += v * c as f64;
            sz += v * r as f64;
        }
    }
    if !(s > 0.0) {
        return Err(Error::LowSignal("calibration frame"));
    }
    Ok((sx / s, sz / s))
}

/// Pixel scale from frames taken before and after translating the sensor by
/// `known_shift`: `known_shift / |mean centroid displacement|`. The centroid
/// is taken on the mean frame of each set, background-subtracted without
/// clamping and restricted to [`CALIBRATION_WINDOW_PX`] around the spot.
/// The origin is the position in the `before` frames.
pub fn calibrate_pixels(before: &[Frame], after: &[Frame], known_shift: f64) -> Result<PixelCalibration> {
    let position = |frames: &[Frame]| -> Result<(f64, f64)> {
        let (grid, width) = mean_image(frames)?;
        window_centroid(&grid, width)
    };
    let a = position(before)?;
    let b = position(after)?;
    let displacement = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    if displacement < 0.5 {
        return Err(Error::InsufficientShift {
            displacement_px: displacement,
        });
    }
    PixelCalibration::new(known_shift.abs() / displacement, a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub estimator: String,
    pub rms_error_m: f64,
    pub mean_cost_s: f64,
    pub cost_ratio_vs_peak: f64,
    pub failures: usize,
}

/// Times each estimator over `frames` (paired with their true `z`) and
/// reports the axial RMS error. Each estimator's pass over all frames is
/// repeated `repeats` times and the fastest pass is kept.
pub fn benchmark_estimators(
    frames: &[(Frame, f64)],
    calib: &PixelCalibration,
    estimators: &[Estimator],
    repeats: usize,
) -> Vec<BenchRow> {
    let mut rows: Vec<BenchRow> = estimators
        .iter()
        .map(|est| {
            let mut best = f64::INFINITY;
            let mut results = Vec::new();
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let out: Vec<Option<f64>> = frames
                    .iter()
                    .map(|(f, _)| localize(f, est, calib).ok().map(|s| s.z_est))
                    .collect();
                best = best.min(start.elapsed().as_secs_f64());
                results = out;
            }
            let mut se = 0.0;
            let mut n_ok = 0usize;
            for (est_z, (_, truth)) in results.iter().zip(frames) {
                if let Some(z) = est_z {
                    se += (z - truth).powi(2);
                    n_ok += 1;
                }
            }
            BenchRow {
                estimator: est.tag(),
                rms_error_m: if n_ok > 0 { (se / n_ok as f64).sqrt() } else { f64::NAN },
                mean_cost_s: best / frames.len().max(1) as f64,
                cost_ratio_vs_peak: f64::NAN,
                failures: frames.len() - n_ok,
            }
        })
        .collect();
    let peak_cost = rows
        .iter()
        .find(|r| r.estimator == "peak")
        .map(|r| r.mean_cost_s);
    for r in &mut rows {
        r.cost_ratio_vs_peak = peak_cost.map_or(f64::NAN, |p| r.mean_cost_s / p);
    }
    rows
}

/// CSV with header `estimator,rms_error_m,mean_cost_s,cost_ratio_vs_peak`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("estimator,rms_error_m,mean_cost_s,cost_ratio_vs_peak\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.estimator, r.rms_error_m, r.mean_cost_s, r.cost_ratio_vs_peak
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{expected_image, CameraLabel};

    fn frame_from(values: &[u32], width: usize) -> Frame {
        Frame {
            width,
            height: values.len() / width,
            counts: values.to_vec(),
            t_mid: 0.25,
            camera: CameraLabel::OutOfLoop,
        }
    }

    fn unit() -> PixelCalibration {
        PixelCalibration::new(1.0, (0.0, 0.0)).unwrap()
    }

    fn noiseless(camera: &CameraModel, z: f64) -> Frame {
        let img = expected_image(z, camera).unwrap();
        Frame {
            width: img.width,
            height: img.height,
            counts: img.values.iter().map(|v| v.round() as u32).collect(),
            t_mid: 0.0,
            camera: camera.label,
        }
    }

    #[test]
    fn single_bright_pixel() {
        let mut v = vec![3u32; 20];
        v[2 * 5 + 3] = 10;
        let s = peak_detect(&frame_from(&v, 5), &unit()).unwrap();
        assert_eq!((s.x_est, s.z_est), (3.0, 2.0));
        assert_eq!(s.t, 0.25);
    }

    #[test]
    fn peak_ties_resolve_row_major() {
        let mut v = vec![0u32; 12];
        v[7] = 5;
        v[5] = 5;
        v[10] = 5;
        let s = peak_detect(&frame_from(&v, 4), &unit()).unwrap();
        assert_eq!((s.x_est, s.z_est), (1.0, 1.0));
        assert!(matches!(
            peak_detect(&frame_from(&[4; 9], 3), &unit()),
            Err(Error::LowSignal(_))
        ));
    }

    #[test]
    fn centroid_hand_values() {
        let grid = frame_from(&[0, 0, 0, 0, 9, 0, 0, 0, 0], 3);
        let s = centroid(&grid, 1, &unit(), BackgroundPolicy::None).unwrap();
        assert_eq!((s.x_est, s.z_est), (1.0, 1.0));

        let row = frame_from(&[1, 3], 2);
        let p1 = centroid(&row, 1, &unit(), BackgroundPolicy::None).unwrap();
        assert!((p1.x_est - 0.75).abs() < 1e-15);
        let p3 = centroid(&row, 3, &unit(), BackgroundPolicy::None).unwrap();
        assert!((p3.x_est - 27.0 / 28.0).abs() < 1e-15);
        assert!((p3.x_est - 0.9643).abs() < 1e-4);

        assert!(matches!(
            centroid(&frame_from(&[0; 9], 3), 1, &unit(), BackgroundPolicy::None),
            Err(Error::LowSignal(_))
        ));
    }

    #[test]
    fn noiseless_centroid_has_small_pixelization_error() {
        let mut cam = CameraModel::out_of_loop_default();
        cam.background_per_px = 0.0;
        cam.photons_per_frame = 1e9;
        let calib = PixelCalibration::from_camera(&cam);
        for i in -10..=10 {
            let delta = 0.05 * i as f64;
            let f = noiseless(&cam, delta * cam.meters_per_pixel());
            let s = centroid(&f, 1, &calib, BackgroundPolicy::None).unwrap();
            let err = s.z_est / cam.meters_per_pixel() - delta;
            assert!(err.abs() < 0.02, "delta {delta}: {err}");
        }
    }

    #[test]
    fn background_policies() {
        let f = frame_from(&[0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0], 4);
        assert_eq!(background_policy(&f, BackgroundPolicy::BorderMedian), background_policy(&f, BackgroundPolicy::None));
        let shifted = frame_from(&[5, 5, 5, 5, 5, 12, 5, 5, 5, 5, 5, 5], 4);
        assert_eq!(background_policy(&shifted, BackgroundPolicy::BorderMedian), background_policy(&f, BackgroundPolicy::None));
        let t = background_policy(&shifted, BackgroundPolicy::Threshold(6.0));
        assert_eq!(t.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!("threshold:2.5".parse::<BackgroundPolicy>().unwrap(), BackgroundPolicy::Threshold(2.5));
        assert!("median".parse::<BackgroundPolicy>().is_err());
    }

    #[test]
    fn fit_recovers_noiseless_center() {
        let mut cam = CameraModel::out_of_loop_default();
        cam.detector_noise = false;
        let calib = PixelCalibration::from_camera(&cam);
        for &delta in &[0.0, 0.13, -0.37, 0.5, 2.71] {
            let img = expected_image(delta * cam.meters_per_pixel(), &cam).unwrap();
            // fit the exact expectation so rounding does not enter
            let frame = Frame {
                width: img.width,
                height: img.height,
                counts: img.values.iter().map(|v| (v * 1e3).round() as u32).collect(),
                t_mid: 0.0,
                camera: cam.label,
            };
            let fit = gaussian_fit(&frame, &calib, None).unwrap();
            let err = fit.sample.z_est / cam.meters_per_pixel() - delta;
            assert!(err.abs() < 1e-3, "delta {delta}: {err}");
        }
    }

    #[test]
    fn fit_on_symmetric_frame_lands_on_symmetry_center() {
        let cam = CameraModel::in_loop_default();
        let f = noiseless(&cam, 0.0);
        let fit = gaussian_fit(&f, &PixelCalibration::from_camera(&cam), None).unwrap();
        assert!(fit.sample.z_est.abs() < 1e-9 * cam.meters_per_pixel());
        assert!(fit.sample.x_est.abs() < 1e-9 * cam.meters_per_pixel());
    }

    #[test]
    fn calibration_recovers_pitch_and_rejects_zero_shift() {
        let mut cam = CameraModel::out_of_loop_default();
        cam.magnification = 1.0;
        let pitch = cam.pixel_pitch;
        let before = vec![noiseless(&cam, 0.2 * pitch)];
        let after = vec![noiseless(&cam, 3.2 * pitch)];
        let c = calibrate_pixels(&before, &after, 3.0 * pitch).unwrap();
        assert!((c.meters_per_pixel / pitch - 1.0).abs() < 1e-3);
        assert!(matches!(
            calibrate_pixels(&before, &before, 3.0 * pitch),
            Err(Error::InsufficientShift { .. })
        ));
    }

    #[test]
    fn bench_csv_header() {
        let csv = bench_csv(&[]);
        assert_eq!(csv, "estimator,rms_error_m,mean_cost_s,cost_ratio_vs_peak\n");
    }
}
