//! Virtual CMOS cameras.
//!
//! The particle image is a pixel-integrated isotropic Gaussian: pixel
//! `(col, row)` spans `[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]` in
//! pixel coordinates and receives `photons * Px(col) * Pz(row)` expected
//! signal counts on top of a flat background, where `Px` and `Pz` are erf
//! differences. The axial coordinate maps to rows:
//! `z_px = z * magnification / pixel_pitch + (height - 1) / 2`. The
//! transverse coordinate sits at the ROI center.
//!
//! Frames carry integer counts: Poisson shot noise on the expectation plus
//! rounded Gaussian read noise, clamped at zero.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraLabel {
    InLoop,
    OutOfLoop,
}

impl fmt::Display for CameraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CameraLabel::InLoop => f.write_str("in-loop"),
            CameraLabel::OutOfLoop => f.write_str("out-of-loop"),
        }
    }
}

/// Exact rational frame rate, e.g. 875.26 fps is `87526/100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fps {
    num: u64,
    den: u64,
}

impl Fps {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::config("frame rate must be a positive rational"));
        }
        let g = gcd(num, den);
        Ok(Fps {
            num: num / g,
            den: den / g,
        })
    }

    pub fn integer(fps: u64) -> Result<Self> {
        Fps::new(fps, 1)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn hz(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn period(&self) -> f64 {
        self.den as f64 / self.num as f64
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fps {
    type Err = Error;

    /// Accepts `"221"`, `"87526/100"` or a finite decimal such as `"875.26"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("cannot parse frame rate {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| bad())?;
            let d: u64 = d.trim().parse().map_err(|_| bad())?;
            return Fps::new(n, d);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let int: u64 = int.parse().map_err(|_| bad())?;
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            return Fps::new(int * den + frac, den);
        }
        Fps::integer(s.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Fps {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fps {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Fps::integer(n).map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub label: CameraLabel,
    /// Sensor pixel pitch, m.
    pub pixel_pitch: f64,
    /// Object-to-image magnification.
    pub magnification: f64,
    pub fps: Fps,
    pub roi_width: usize,
    pub roi_height: usize,
    /// PSF standard deviation, px.
    pub psf_sigma: f64,
    /// Expected signal counts per frame.
    pub photons_per_frame: f64,
    /// Expected background counts per pixel.
    pub background_per_px: f64,
    /// Read noise, counts rms.
    pub read_noise_rms: f64,
    /// Exposure as a fraction of the frame period.
    pub exposure: f64,
    /// Shot and read noise switch; when off a frame is the rounded expectation.
    pub detector_noise: bool,
}

impl CameraModel {
    /// Camera 2: 221 fps, 20x30 ROI.
    pub fn in_loop_default() -> Self {
        CameraModel {
            label: CameraLabel::InLoop,
            pixel_pitch: 5.35e-6,
            magnification: 0.18,
            fps: Fps::integer(221).unwrap(),
            roi_width: 20,
            roi_height: 30,
            psf_sigma: 1.5,
            photons_per_frame: 2e4,
            background_per_px: 20.0,
            read_noise_rms: 2.0,
            exposure: 0.5,
            detector_noise: true,
        }
    }

    /// Camera 1: 875.26 fps, larger ROI.
    pub fn out_of_loop_default() -> Self {
        CameraModel {
            label: CameraLabel::OutOfLoop,
            fps: Fps::new(87526, 100).unwrap(),
            roi_width: 16,
            roi_height: 48,
            ..CameraModel::in_loop_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.label;
        if !(self.pixel_pitch > 0.0) {
            return Err(Error::config(format!("{name}: pixel_pitch must be > 0")));
        }
        if !(self.magnification > 0.0) {
            return Err(Error::config(format!("{name}: magnification must be > 0")));
        }
        if self.roi_width < 3 || self.roi_height < 3 {
            return Err(Error::config(format!("{name}: ROI dimensions must be >= 3")));
        }
        if !(self.psf_sigma >= 0.5) {
            return Err(Error::config(format!("{name}: psf_sigma must be >= 0.5 px")));
        }
        if !(self.photons_per_frame > 0.0) {
            return Err(Error::config(format!("{name}: photons_per_frame must be > 0")));
        }
        if !(self.background_per_px >= 0.0 && self.read_noise_rms >= 0.0) {
            return Err(Error::config(format!("{name}: noise levels must be >= 0")));
        }
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(Error::config(format!("{name}: exposure must be in (0, 1]")));
        }
        Ok(())
    }

    /// Object-plane size of one pixel, m.
    pub fn meters_per_pixel(&self) -> f64 {
        self.pixel_pitch / self.magnification
    }

    pub fn center_px(&self) -> (f64, f64) {
        (
            0.5 * (self.roi_width as f64 - 1.0),
            0.5 * (self.roi_height as f64 - 1.0),
        )
    }

    /// Axial image coordinate of a particle at `z`, px.
    pub fn z_to_px(&self, z: f64) -> f64 {
        z / self.meters_per_pixel() + self.center_px().1
    }

    pub fn exposure_time(&self) -> f64 {
        self.exposure * self.fps.period()
    }

    pub fn n_pixels(&self) -> usize {
        self.roi_width * self.roi_height
    }
}

/// Expected counts per pixel for one exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width` values.
    pub values: Vec<f64>,
    /// Image center `(x, z)`, px.
    pub center: (f64, f64),
    /// Center lies outside the ROI (the image is partially clipped).
    pub clipped: bool,
}

impl ExpectedImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Fraction of a unit-mass Gaussian at `center` falling into each pixel.
fn pixel_profile(n: usize, center: f64, sigma: f64, out: &mut Vec<f64>) {
    out.clear();
    let scale = 1.0 / (std::f64::consts::SQRT_2 * sigma);
    let mut lower = erf((-0.5 - center) * scale);
    for i in 0..n {
        let upper = erf((i as f64 + 0.5 - center) * scale);
        out.push(0.5 * (upper - lower));
        lower = upper;
    }
}

/// Expected image of a particle at axial position `z_true`.
pub fn expected_image(z_true: f64, camera: &CameraModel) -> Result<ExpectedImage> {
    let (xc, _) = camera.center_px();
    let zc = camera.z_to_px(z_true);
    let (w, h) = (camera.roi_width, camera.roi_height);
    let margin = 3.0 * camera.psf_sigma;
    if !zc.is_finite() || zc < -0.5 - margin || zc > h as f64 - 0.5 + margin {
        return Err(Error::ParticleLost {
            camera: camera.label,
            t: f64::NAN,
            center_px: zc,
        });
    }
    let clipped = zc < -0.5 || zc > h as f64 - 0.5;

    let mut px = Vec::with_capacity(w);
    let mut pz = Vec::with_capacity(h);
    pixel_profile(w, xc, camera.psf_sigma, &mut px);
    pixel_profile(h, zc, camera.psf_sigma, &mut pz);
    let mut values = Vec::with_capacity(w * h);
    for &fz in &pz {
        let row_scale = camera.photons_per_frame * fz;
        values.extend(px.iter().map(|&fx| camera.background_per_px + row_scale * fx));
    }
    Ok(ExpectedImage {
        width: w,
        height: h,
        values,
        center: (xc, zc),
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major counts.
    pub counts: Vec<u32>,
    /// Exposure midpoint, s.
    pub t_mid: f64,
    pub camera: CameraLabel,
}

impl Frame {
    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.width + col]
    }

    /// Raw dump: row-major, width x height little-endian u16, saturating.
    pub fn write_u16<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for &c in &self.counts {
            out.write_all(&(c.min(u16::MAX as u32) as u16).to_le_bytes())?;
        }
        Ok(())
    }

    /// CSV dump: one line per row, comma-separated counts.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for row in self.counts.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Random sources of one camera; shot and read noise use separate streams.
pub struct NoiseStreams<'a, R: Rng> {
    pub shot: &'a mut R,
    pub read: &'a mut R,
}

/// Renders one noisy frame of a particle at `z_true` (position at exposure midpoint).
pub fn render_frame<R: Rng>(
    z_true: f64,
    t_mid: f64,
    camera: &CameraModel,
    noise: NoiseStreams<'_, R>,
) -> Result<Frame> {
    let expected = expected_image(z_true, camera).map_err(|e| match e {
        Error::ParticleLost {
            camera, center_px, ..
        } => Error::ParticleLost {
            camera,
            t: t_mid,
            center_px,
        },
        other => other,
    })?;
    Ok(sample_frame(&expected, t_mid, camera, noise))
}

/// Draws detector counts for an expected image.
pub fn sample_frame<R: Rng>(
    expected: &ExpectedImage,
    t_mid: f64,
    camera: &CameraModel,
    noise: NoiseStreams<'_, R>,
) -> Frame {
    let counts = if camera.detector_noise {
        let read_rms = camera.read_noise_rms;
        expected
            .values
            .iter()
            .map(|&lambda| {
                let shot = if lambda > 0.0 {
                    Poisson::new(lambda).map_or(0.0, |p| p.sample(&mut *noise.shot))
                } else {
                    0.0
                };
                let read = if read_rms > 0.0 {
                    let n: f64 = noise.read.sample(StandardNormal);
                    (read_rms * n).round()
                } else {
                    0.0
                };
                (shot + read).max(0.0) as u32
            })
            .collect()
    } else {
        expected
            .values
            .iter()
            .map(|&lambda| lambda.round().max(0.0) as u32)
            .collect()
    };
    Frame {
        width: expected.width,
        height: expected.height,
        counts,
        t_mid,
        camera: camera.label,
    }
}

/// How the true trajectory over one exposure maps to the rendered position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MotionBlur {
    /// Position at the exposure midpoint.
    #[default]
    Midpoint,
    /// Mean of `n` evenly spaced subsamples across the exposure.
    Average(usize),
}

impl MotionBlur {
    /// Sample times relative to the exposure midpoint.
    pub fn sample_offsets(&self, exposure_time: f64) -> Vec<f64> {
        match *self {
            MotionBlur::Midpoint | MotionBlur::Average(0) | MotionBlur::Average(1) => vec![0.0],
            MotionBlur::Average(n) => (0..n)
                .map(|i| ((i as f64 + 0.5) / n as f64 - 0.5) * exposure_time)
                .collect(),
        }
    }

    /// Effective render position from positions taken at [`Self::sample_offsets`].
    pub fn effective_position(&self, samples: &[f64]) -> f64 {
        samples.iter().sum::<f64>() / samples.len() as f64
    }
}

impl fmt::Display for MotionBlur {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MotionBlur::Midpoint => f.write_str("midpoint"),
            MotionBlur::Average(n) => write!(f, "average:{n}"),
        }
    }
}

impl FromStr for MotionBlur {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "midpoint" => Ok(MotionBlur::Midpoint),
            other => other
                .strip_prefix("average:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(MotionBlur::Average)
                .ok_or_else(|| Error::config(format!("unknown motion blur policy {other:?}"))),
        }
    }
}

/// Upper bound on the axial excursion during one exposure for a harmonic
/// motion of `amplitude` at `f0`: `2 pi f0 * exposure_time * amplitude`.
pub fn blur_excursion_bound(f0: f64, exposure_time: f64, amplitude: f64) -> f64 {
    2.0 * std::f64::consts::PI * f0 * exposure_time * amplitude
}
