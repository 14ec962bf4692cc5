//! Offline imaging workflows: estimator benchmark and pixel calibration.

use rand::Rng;

use crate::harness::engine::{stream_rng, Stream};
use crate::imaging::{render_frame, CameraModel, Frame, NoiseStreams};
use crate::localization::{
    benchmark_estimators, calibrate_pixels, BenchRow, Estimator, PixelCalibration,
};
use crate::{Error, Result};

/// `n` frames with the particle uniformly placed within `+-span_px` of the
/// ROI center, paired with the true `z`.
pub fn bench_frames(camera: &CameraModel, n: usize, span_px: f64, seed: u64) -> Result<Vec<(Frame, f64)>> {
    let mut pos = stream_rng(seed, Stream::Init);
    let mut shot = stream_rng(seed, Stream::OutOfLoopShot);
    let mut read = stream_rng(seed, Stream::OutOfLoopRead);
    let mpp = camera.meters_per_pixel();
    (0..n)
        .map(|i| {
            let z = pos.random_range(-span_px..=span_px) * mpp;
            let t = i as f64 * camera.fps.period();
            let f = render_frame(
                z,
                t,
                camera,
                NoiseStreams {
                    shot: &mut shot,
                    read: &mut read,
                },
            )?;
            Ok((f, z))
        })
        .collect()
}

/// Benchmarks `estimators` on synthetic frames from `camera`.
pub fn run_bench(
    camera: &CameraModel,
    estimators: &[Estimator],
    n_frames: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if n_frames == 0 {
        return Err(Error::config("bench needs at least one frame"));
    }
    let frames = bench_frames(camera, n_frames, 3.0, seed)?;
    Ok(benchmark_estimators(
        &frames,
        &PixelCalibration::from_camera(camera),
        estimators,
        repeats,
    ))
}

/// Renders `n` frames before and after a known object-plane translation
/// `shift_m` and derives the pixel scale from the centroid displacement.
pub fn run_pixel_calibration(camera: &CameraModel, shift_m: f64, n: usize, seed: u64) -> Result<PixelCalibration> {
    let mut shot = stream_rng(seed, Stream::OutOfLoopShot);
    let mut read = stream_rng(seed, Stream::OutOfLoopRead);
    let mut frames = |z: f64| -> Result<Vec<Frame>> {
        (0..n)
            .map(|i| {
                render_frame(
                    z,
                    i as f64 * camera.fps.period(),
                    camera,
                    NoiseStreams {
                        shot: &mut shot,
                        read: &mut read,
                    },
                )
            })
            .collect()
    };
    let before = frames(-0.5 * shift_m)?;
    let after = frames(0.5 * shift_m)?;
    calibrate_pixels(&before, &after, shift_m)
}
