use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use levicool::imaging::{render_frame, CameraLabel, CameraModel, Frame, NoiseStreams};
use levicool::localization::{
    calibrate_pixels, centroid, gaussian_fit, localize, peak_detect, BackgroundPolicy, Estimator, PixelCalibration,
};

struct Source {
    shot: ChaCha8Rng,
    read: ChaCha8Rng,
}

impl Source {
    fn new(seed: u64) -> Self {
        Source {
            shot: ChaCha8Rng::seed_from_u64(seed),
            read: ChaCha8Rng::seed_from_u64(seed.wrapping_add(7919)),
        }
    }

    fn frame(&mut self, z: f64, cam: &CameraModel) -> Frame {
        render_frame(
            z,
            0.0,
            cam,
            NoiseStreams {
                shot: &mut self.shot,
                read: &mut self.read,
            },
        )
        .unwrap()
    }
}

const P1: Estimator = Estimator::Centroid {
    power: 1,
    background: BackgroundPolicy::BorderMedian,
};

fn rms_error(cam: &CameraModel, est: &Estimator, n: usize, seed: u64) -> f64 {
    let calib = PixelCalibration::from_camera(cam);
    let mpp = cam.meters_per_pixel();
    let mut pos = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Source::new(seed + 1);
    let mut se = 0.0;
    for _ in 0..n {
        let z = pos.random_range(-1.0..1.0) * mpp;
        let s = localize(&src.frame(z, cam), est, &calib).unwrap();
        se += (s.z_est - z).powi(2);
    }
    (se / n as f64).sqrt()
}

/// The analysis camera of the estimator-floor configuration.
fn bright_camera() -> CameraModel {
    CameraModel {
        photons_per_frame: 2e5,
        background_per_px: 2.0,
        read_noise_rms: 1.0,
        ..CameraModel::out_of_loop_default()
    }
}

/// Mean estimate change when the particle moves by `shift`, per estimator.
fn mean_response(cam: &CameraModel, ests: &[Estimator], shift: f64, n: usize) -> Vec<f64> {
    let calib = PixelCalibration::from_camera(cam);
    let mpp = cam.meters_per_pixel();
    let mut src = Source::new(4);
    let mut pos = ChaCha8Rng::seed_from_u64(40);
    let mut diffs = vec![0.0; ests.len()];
    for _ in 0..n {
        let z = pos.random_range(-0.4..0.4) * mpp;
        let (a, b) = (src.frame(z, cam), src.frame(z + shift, cam));
        for (d, e) in diffs.iter_mut().zip(ests) {
            *d += localize(&b, e, &calib).unwrap().z_est - localize(&a, e, &calib).unwrap().z_est;
        }
    }
    diffs.iter().map(|d| d / n as f64).collect()
}

#[test]
fn centroid_error_does_not_grow_with_photons() {
    let mut last = f64::INFINITY;
    for photons in [2e3, 5e3, 2e4, 5e4, 2e5] {
        let cam = CameraModel {
            photons_per_frame: photons,
            ..CameraModel::out_of_loop_default()
        };
        let e = rms_error(&cam, &P1, 1500, 3);
        assert!(e <= last, "{photons} photons: {e} > {last}");
        last = e;
    }
}

#[test]
fn fit_and_centroid_agree_at_high_snr() {
    let cam = bright_camera();
    let c = rms_error(&cam, &P1, 1500, 5);
    let g = rms_error(&cam, &Estimator::GaussianFit, 1500, 5);
    let ratio = c.max(g) / c.min(g);
    assert!(ratio < 1.3, "centroid {c}, fit {g}");
}

#[test]
fn background_subtraction_removes_the_pull_toward_the_roi_center() {
    let cam = CameraModel::out_of_loop_default();
    let calib = PixelCalibration::from_camera(&cam);
    let mpp = cam.meters_per_pixel();
    let offset_px = 0.5;
    let mut src = Source::new(21);
    let n = 2000;
    let (mut raw, mut sub) = (0.0, 0.0);
    for _ in 0..n {
        let f = src.frame(offset_px * mpp, &cam);
        raw += centroid(&f, 1, &calib, BackgroundPolicy::None).unwrap().z_est / mpp;
        sub += centroid(&f, 1, &calib, BackgroundPolicy::BorderMedian).unwrap().z_est / mpp;
    }
    let (raw_bias, sub_bias) = (raw / n as f64 - offset_px, sub / n as f64 - offset_px);
    assert!(raw_bias < -0.1, "raw bias {raw_bias}");
    assert!(sub_bias.abs() < 0.05, "subtracted bias {sub_bias}");
}

#[test]
fn all_estimators_follow_a_constant_offset() {
    let cam = bright_camera();
    let ests = [Estimator::Peak, P1, Estimator::GaussianFit];
    // peak detection only resolves whole pixels, so shift by exactly two
    let shift = 2.0 * cam.meters_per_pixel();
    for (mean, e) in mean_response(&cam, &ests, shift, 400).iter().zip(&ests) {
        assert!((mean / shift - 1.0).abs() < 0.02, "{}: {mean} vs {shift}", e.tag());
    }
}

#[test]
fn clamped_background_compresses_the_p1_centroid_on_the_default_budget() {
    // clipped noise around the spot weighs toward the ROI center; the fit has no such pull
    let cam = CameraModel::out_of_loop_default();
    let shift = 2.0 * cam.meters_per_pixel();
    let r = mean_response(&cam, &[P1, Estimator::GaussianFit], shift, 400);
    assert!((0.85..0.97).contains(&(r[0] / shift)), "{}", r[0] / shift);
    assert!((r[1] / shift - 1.0).abs() < 0.02, "{}", r[1] / shift);
}

#[test]
fn ten_frame_calibration_is_within_half_a_percent() {
    let cam = CameraModel::out_of_loop_default();
    let mpp = cam.meters_per_pixel();
    let shift = 10.0 * mpp;
    let mut src = Source::new(8);
    for _ in 0..20 {
        let before: Vec<Frame> = (0..10).map(|_| src.frame(-0.5 * shift, &cam)).collect();
        let after: Vec<Frame> = (0..10).map(|_| src.frame(0.5 * shift, &cam)).collect();
        let c = calibrate_pixels(&before, &after, shift).unwrap();
        assert!((c.meters_per_pixel / mpp - 1.0).abs() < 0.005, "{}", c.meters_per_pixel / mpp);
    }
}

#[test]
fn peak_output_lies_on_the_pixel_grid() {
    let cam = CameraModel::in_loop_default();
    let calib = PixelCalibration::from_camera(&cam);
    let mut src = Source::new(2);
    let mut pos = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let z = pos.random_range(-3.0..3.0) * cam.meters_per_pixel();
        let s = peak_detect(&src.frame(z, &cam), &calib).unwrap();
        let px = (s.z_est / calib.meters_per_pixel) + calib.origin_px.1;
        assert!((px - px.round()).abs() < 1e-9, "{px}");
    }
}

fn shifted(width: usize, height: usize, counts: &[u32], dx: usize, dz: usize) -> Frame {
    let (w2, h2) = (width + dx, height + dz);
    let mut out = vec![0u32; w2 * h2];
    for r in 0..height {
        for c in 0..width {
            out[(r + dz) * w2 + c + dx] = counts[r * width + c];
        }
    }
    Frame {
        width: w2,
        height: h2,
        counts: out,
        t_mid: 0.0,
        camera: CameraLabel::InLoop,
    }
}

proptest! {
    #[test]
    fn centroid_is_translation_equivariant(
        counts in prop::collection::vec(0u32..4000, 36),
        dx in 0usize..5,
        dz in 0usize..5,
        power in 1u32..4,
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let calib = PixelCalibration::new(1.0, (0.0, 0.0)).unwrap();
        let a = centroid(&shifted(6, 6, &counts, 0, 0), power, &calib, BackgroundPolicy::None).unwrap();
        let b = centroid(&shifted(6, 6, &counts, dx, dz), power, &calib, BackgroundPolicy::None).unwrap();
        prop_assert!((b.x_est - a.x_est - dx as f64).abs() < 1e-9);
        prop_assert!((b.z_est - a.z_est - dz as f64).abs() < 1e-9);
    }

    #[test]
    fn centroid_stays_inside_the_roi(counts in prop::collection::vec(0u32..65535, 20 * 30), power in 1u32..4) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let calib = PixelCalibration::new(1.0, (0.0, 0.0)).unwrap();
        let f = shifted(20, 30, &counts, 0, 0);
        let s = centroid(&f, power, &calib, BackgroundPolicy::None).unwrap();
        prop_assert!((0.0..=19.0).contains(&s.x_est) && (0.0..=29.0).contains(&s.z_est));
    }

    #[test]
    fn noiseless_fit_recovers_subpixel_center(dz in -2.0f64..2.0) {
        let cam = CameraModel { detector_noise: false, photons_per_frame: 1e6, ..CameraModel::in_loop_default() };
        let calib = PixelCalibration::from_camera(&cam);
        let z = dz * cam.meters_per_pixel();
        let mut src = Source::new(0);
        let fit = gaussian_fit(&src.frame(z, &cam), &calib, None).unwrap();
        prop_assert!(((fit.sample.z_est - z) / cam.meters_per_pixel()).abs() < 2e-3);
    }
}
