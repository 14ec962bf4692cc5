//! Spectral thermometry: Welch PSD, motional-peak area and sweep summaries.
//!
//! All spectra are one-sided and in the frequency domain (Hz), so the area
//! under a PSD is the variance of the trace. Temperatures are obtained from
//! the area by a calibration coefficient (K/m^2) fixed on thermal reference
//! runs, so the `2 pi` of an angular-frequency integral never matters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::lsq::{self, Model, Settings};
use crate::units::K_B;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann, the usual choice for spectral averaging
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        })
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hann" => Ok(Window::Hann),
            "rectangular" | "boxcar" => Ok(Window::Rectangular),
            other => Err(Error::config(format!("unknown window {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchParams {
    pub segment_len: usize,
    /// Fractional overlap in `[0, 1)`.
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchParams {
    fn default() -> Self {
        WelchParams {
            segment_len: 4096,
            overlap: 0.5,
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Psd {
    pub freqs: Vec<f64>,
    /// One-sided PSD, m^2/Hz.
    pub values: Vec<f64>,
    pub df: f64,
    pub window: Window,
    pub segment_len: usize,
    pub overlap: f64,
    pub n_segments: usize,
    pub fs: f64,
}

impl Psd {
    /// `sum(values) * df`, the variance carried by the spectrum.
    pub fn total_power(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.df
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "freq_hz,psd_m2_per_hz")?;
        for (f, v) in self.freqs.iter().zip(&self.values) {
            writeln!(out, "{f},{v}")?;
        }
        Ok(())
    }
}

/// Welch estimate with per-segment mean removal.
///
/// One-sided scaling `2 / (fs * sum w^2)` (DC and Nyquist bins not doubled)
/// makes `sum(values) * df` equal the window-weighted mean-square of the
/// detrended trace.
pub fn welch_psd(trace: &[f64], fs: f64, params: &WelchParams) -> Result<Psd> {
    let n = params.segment_len;
    if n < 8 {
        return Err(Error::config("Welch segment length must be >= 8"));
    }
    if !(0.0..1.0).contains(&params.overlap) {
        return Err(Error::config("Welch overlap must lie in [0, 1)"));
    }
    if !(fs > 0.0) {
        return Err(Error::config("sample rate must be > 0"));
    }
    if trace.len() < n {
        return Err(Error::InsufficientData(format!(
            "trace of {} samples is shorter than one {n}-sample segment",
            trace.len()
        )));
    }
    let hop = ((n as f64 * (1.0 - params.overlap)).round() as usize).max(1);
    let n_segments = (trace.len() - n) / hop + 1;
    let w = params.window.coefficients(n);
    let w2: f64 = w.iter().map(|x| x * x).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let n_bins = n / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for s in 0..n_segments {
        let seg = &trace[s * hop..s * hop + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for ((b, &x), &wi) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex64::new((x - mean) * wi, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = 1.0 / (fs * w2 * n_segments as f64);
    let values: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            one_sided * a * scale
        })
        .collect();
    let df = fs / n as f64;
    Ok(Psd {
        freqs: (0..n_bins).map(|k| k as f64 * df).collect(),
        values,
        df,
        window: params.window,
        segment_len: n,
        overlap: params.overlap,
        n_segments,
        fs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo && f <= self.hi
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

/// Median of the PSD values outside `band`, excluding the DC bin.
pub fn noise_floor(psd: &Psd, band: &Band) -> Option<f64> {
    median(
        psd.freqs
            .iter()
            .zip(&psd.values)
            .skip(1)
            .filter(|(f, _)| !band.contains(**f))
            .map(|(_, v)| *v)
            .collect(),
    )
}

/// Trapezoidal area of `values - floor` over the bins inside `band`,
/// clamped at zero. The floor is [`noise_floor`] (zero when no bins lie
/// outside the band).
pub fn peak_area(psd: &Psd, band: &Band) -> Result<f64> {
    let f_max = *psd.freqs.last().unwrap_or(&0.0);
    if !(band.lo >= 0.0 && band.hi > band.lo && band.hi <= f_max) {
        return Err(Error::Range(format!(
            "band [{}, {}] Hz outside the PSD range [0, {f_max}] Hz",
            band.lo, band.hi
        )));
    }
    let floor = noise_floor(psd, band).unwrap_or(0.0);
    let inside: Vec<(f64, f64)> = psd
        .freqs
        .iter()
        .zip(&psd.values)
        .filter(|(f, _)| band.contains(**f))
        .map(|(f, v)| (*f, v - floor))
        .collect();
    let area: f64 = inside
        .windows(2)
        .map(|p| 0.5 * (p[0].1 + p[1].1) * (p[1].0 - p[0].0))
        .sum();
    Ok(area.max(0.0))
}

/// Damped-oscillator line shape `a / ((fc^2 - f^2)^2 + (w f)^2) + c`,
/// whose FWHM is `w` Hz in the weak-damping limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    pub amplitude: f64,
    pub floor: f64,
    pub converged: bool,
}

impl PeakFit {
    pub fn eval(&self, f: f64) -> f64 {
        line_shape(self.amplitude, self.center_hz, self.fwhm_hz, f) + self.floor
    }
}

fn line_shape(a: f64, fc: f64, w: f64, f: f64) -> f64 {
    let d = fc * fc - f * f;
    a / (d * d + w * w * f * f)
}

/// Fits in log space over `(ln a, fc, ln w, ln c)`.
struct LineModel<'a> {
    f: &'a [f64],
    ln_y: &'a [f64],
}

impl Model for LineModel<'_> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.f.len()
    }
    fn evaluate(&self, p: &[f64], r: &mut [f64], jac: &mut [f64]) {
        let (a, fc, w, c) = (p[0].exp(), p[1], p[2].exp(), p[3].exp());
        for (k, (&f, &ly)) in self.f.iter().zip(self.ln_y).enumerate() {
            let d = fc * fc - f * f;
            let den = d * d + w * w * f * f;
            let l = a / den;
            let m = l + c;
            r[k] = m.ln() - ly;
            let row = &mut jac[4 * k..4 * k + 4];
            row[0] = l / m;
            row[1] = -l / den * 4.0 * d * fc / m;
            row[2] = -l / den * 2.0 * w * w * f * f / m;
            row[3] = c / m;
        }
    }
    fn admissible(&self, p: &[f64]) -> bool {
        p.iter().all(|x| x.is_finite()) && p[1] > 0.0 && p[2] < 30.0
    }
}

/// Locates the motional peak inside `search` and fits its line shape over
/// every bin from the first non-DC bin up to `search.hi`, so an overdamped
/// spectrum whose power sits below `search.lo` is still described.
pub fn fit_peak(psd: &Psd, search: &Band) -> Result<PeakFit> {
    let idx: Vec<usize> = (1..psd.freqs.len())
        .filter(|&i| search.contains(psd.freqs[i]) && psd.values[i] > 0.0)
        .collect();
    if idx.len() < 8 {
        return Err(Error::InsufficientData(
            "too few PSD bins in the peak search range".into(),
        ));
    }
    let &i_peak = idx
        .iter()
        .max_by(|&&a, &&b| psd.values[a].total_cmp(&psd.values[b]))
        .expect("non-empty");
    let peak = psd.values[i_peak];
    let fc0 = psd.freqs[i_peak];
    let floor0 = median(idx.iter().map(|&i| psd.values[i]).collect())
        .unwrap_or(0.0)
        .min(0.5 * peak)
        .max(peak * 1e-12);
    // width from the half-maximum crossings, at least two bins
    let half = floor0 + 0.5 * (peak - floor0);
    let mut lo = i_peak;
    while lo > 1 && psd.values[lo - 1] > half {
        lo -= 1;
    }
    let mut hi = i_peak;
    while hi + 1 < psd.values.len() && psd.values[hi + 1] > half {
        hi += 1;
    }
    let w0 = ((hi - lo + 1) as f64 * psd.df).max(2.0 * psd.df);
    let a0 = (peak - floor0).max(peak * 1e-3) * w0 * w0 * fc0 * fc0;

    let fit_idx: Vec<usize> = (1..psd.freqs.len())
        .filter(|&i| psd.freqs[i] <= search.hi && psd.values[i] > 0.0)
        .collect();
    let f: Vec<f64> = fit_idx.iter().map(|&i| psd.freqs[i]).collect();
    let ln_y: Vec<f64> = fit_idx.iter().map(|&i| psd.values[i].ln()).collect();
    let model = LineModel { f: &f, ln_y: &ln_y };
    let out = lsq::solve(
        &model,
        &[a0.ln(), fc0, w0.ln(), floor0.ln()],
        Settings {
            max_iterations: 200,
            rel_tol: 1e-10,
        },
    );
    let p = &out.params;
    let fit = PeakFit {
        center_hz: p[1],
        fwhm_hz: p[2].exp(),
        amplitude: p[0].exp(),
        floor: p[3].exp(),
        converged: out.converged,
    };
    if !(fit.center_hz.is_finite() && fit.center_hz >= psd.df && fit.center_hz <= search.hi) {
        // fall back to the raw maximum when the fit wanders off
        return Ok(PeakFit {
            center_hz: fc0,
            fwhm_hz: w0,
            amplitude: a0,
            floor: floor0,
            converged: false,
        });
    }
    Ok(fit)
}

/// Simpson integral of `g` over `[a, b]` with `n` (even) intervals.
fn simpson(g: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = g(a) + g(b);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * g(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Integral of the fitted line shape (floor excluded) over `[0, lo]` and
/// `[hi, inf)`: the part of the peak a band integral between `lo` and `hi`
/// misses.
pub fn line_tail_area(fit: &PeakFit, lo: f64, hi: f64) -> f64 {
    let (a, fc, w) = (fit.amplitude, fit.center_hz, fit.fwhm_hz);
    let shape = |f: f64| line_shape(a, fc, w, f);
    let below = if lo > 0.0 { simpson(shape, 0.0, lo, 4096) } else { 0.0 };
    // u = 1 / f maps [hi, inf) onto (0, 1 / hi]
    let above = simpson(
        |u| if u > 0.0 { shape(1.0 / u) / (u * u) } else { a },
        0.0,
        1.0 / hi,
        4096,
    );
    below + above
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPolicy {
    /// Half-width in units of the fitted FWHM.
    pub fwhm_multiple: f64,
    /// Minimum half-width, Hz.
    pub min_half_width_hz: f64,
    /// Upper edge cap as a fraction of Nyquist.
    pub max_nyquist_fraction: f64,
}

impl Default for BandPolicy {
    fn default() -> Self {
        BandPolicy {
            fwhm_multiple: 10.0,
            min_half_width_hz: 10.0,
            max_nyquist_fraction: 0.8,
        }
    }
}

/// `center +- max(k * FWHM, min)`, clipped to `[df, cap * Nyquist]`.
pub fn integration_band(psd: &Psd, fit: &PeakFit, policy: &BandPolicy) -> Band {
    let half = (policy.fwhm_multiple * fit.fwhm_hz).max(policy.min_half_width_hz);
    let cap = policy.max_nyquist_fraction * 0.5 * psd.fs;
    let hi = (fit.center_hz + half).min(cap).max(fit.center_hz + psd.df);
    Band {
        lo: (fit.center_hz - half).max(psd.df).min(fit.center_hz),
        hi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// K/m^2.
    pub coeff: f64,
    pub t_room: f64,
    pub n_references: usize,
    /// `(max - min) / mean` of the reference areas.
    pub spread: f64,
}

pub const CALIBRATION_SPREAD_WARNING: f64 = 0.10;

/// `t_room / mean(reference_areas)`.
pub fn calibrate_temperature(reference_areas: &[f64], t_room: f64) -> Result<Calibration> {
    if reference_areas.is_empty() {
        return Err(Error::Calibration("no reference runs".into()));
    }
    if reference_areas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::Calibration("reference areas must be positive".into()));
    }
    let n = reference_areas.len() as f64;
    let mean = reference_areas.iter().sum::<f64>() / n;
    let max = reference_areas.iter().cloned().fold(f64::MIN, f64::max);
    let min = reference_areas.iter().cloned().fold(f64::MAX, f64::min);
    let spread = (max - min) / mean;
    if spread > CALIBRATION_SPREAD_WARNING {
        log::warn!(
            "reference areas spread by {:.1}% (> {:.0}%)",
            100.0 * spread,
            100.0 * CALIBRATION_SPREAD_WARNING
        );
    }
    Ok(Calibration {
        coeff: t_room / mean,
        t_room,
        n_references: reference_areas.len(),
        spread,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    pub t_eff: f64,
    pub area: f64,
    pub band: Band,
    pub calib_coeff: f64,
    pub omega_cm: f64,
    pub fwhm_hz: f64,
    /// `m w_cm^2 area / k_B`, when the mass is known.
    pub t_mass: Option<f64>,
}

pub fn effective_temperature(
    psd: &Psd,
    band: &Band,
    omega_cm: f64,
    calib_coeff: f64,
    mass: Option<f64>,
) -> Result<TemperatureEstimate> {
    let area = peak_area(psd, band)?;
    Ok(TemperatureEstimate {
        t_eff: calib_coeff * area,
        area,
        band: *band,
        calib_coeff,
        omega_cm,
        fwhm_hz: f64::NAN,
        t_mass: mass.map(|m| m * omega_cm * omega_cm * area / K_B),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakAnalysis {
    pub fit: PeakFit,
    pub band: Band,
    /// Floor-subtracted integral over `band`.
    pub band_area: f64,
    /// Fitted line shape outside the integrated bins (zero without a converged fit).
    pub tail_area: f64,
    /// `band_area + tail_area`, m^2.
    pub area: f64,
}

/// Peak fit, band choice and area in one call.
pub fn analyze_peak(psd: &Psd, search: &Band, policy: &BandPolicy) -> Result<PeakAnalysis> {
    let fit = fit_peak(psd, search)?;
    let band = integration_band(psd, &fit, policy);
    let band_area = peak_area(psd, &band)?;
    let tail_area = match (fit.converged, band_bin_edges(psd, &band)) {
        (true, Some((lo, hi))) => line_tail_area(&fit, lo, hi),
        _ => 0.0,
    };
    Ok(PeakAnalysis {
        fit,
        band,
        band_area,
        tail_area,
        area: band_area + tail_area,
    })
}

/// First and last bin frequency inside `band`.
fn band_bin_edges(psd: &Psd, band: &Band) -> Option<(f64, f64)> {
    let mut inside = psd.freqs.iter().copied().filter(|f| band.contains(*f));
    let first = inside.next()?;
    Some((first, inside.last().unwrap_or(first)))
}

/// Fits, integrates (with the tail correction of [`analyze_peak`]) and
/// converts to temperature.
pub fn measure_temperature(
    psd: &Psd,
    search: &Band,
    policy: &BandPolicy,
    calib_coeff: f64,
    mass: Option<f64>,
) -> Result<TemperatureEstimate> {
    let peak = analyze_peak(psd, search, policy)?;
    let omega_cm = 2.0 * std::f64::consts::PI * peak.fit.center_hz;
    Ok(TemperatureEstimate {
        t_eff: calib_coeff * peak.area,
        area: peak.area,
        band: peak.band,
        calib_coeff,
        omega_cm,
        fwhm_hz: peak.fit.fwhm_hz,
        t_mass: mass.map(|m| m * omega_cm * omega_cm * peak.area / K_B),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub area: f64,
    pub t_eff: f64,
    pub omega_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub argmin: usize,
    pub argmax: usize,
    pub t_min: f64,
    pub t_max: f64,
}

/// Sorts nothing; rows keep the sweep order. Non-finite temperatures are
/// ignored for the extrema.
pub fn sweep_summary(rows: &[SweepRow]) -> Result<SweepSummary> {
    let finite: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].t_eff.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::InsufficientData("no usable sweep points".into()));
    }
    let argmin = *finite
        .iter()
        .min_by(|&&a, &&b| rows[a].t_eff.total_cmp(&rows[b].t_eff))
        .expect("non-empty");
    let argmax = *finite
        .iter()
        .max_by(|&&a, &&b| rows[a].t_eff.total_cmp(&rows[b].t_eff))
        .expect("non-empty");
    Ok(SweepSummary {
        rows: rows.to_vec(),
        argmin,
        argmax,
        t_min: rows[argmin].t_eff,
        t_max: rows[argmax].t_eff,
    })
}

impl SweepSummary {
    /// Runs of consecutive points with `t_eff` below (`-1`) or above (`+1`)
    /// `reference`; with `circular` the first and last runs merge when they
    /// share a sign.
    pub fn regions(&self, reference: f64, circular: bool) -> Vec<(i8, Vec<usize>)> {
        let mut out: Vec<(i8, Vec<usize>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            let s = if r.t_eff < reference { -1 } else { 1 };
            match out.last_mut() {
                Some((sign, idx)) if *sign == s => idx.push(i),
                _ => out.push((s, vec![i])),
            }
        }
        if circular && out.len() > 1 && out[0].0 == out[out.len() - 1].0 {
            let last = out.pop().expect("len > 1");
            let mut merged = last.1;
            merged.extend(&out[0].1);
            out[0].1 = merged;
        }
        out
    }

    pub fn has_interior_minimum(&self) -> bool {
        self.argmin > 0 && self.argmin + 1 < self.rows.len()
    }

    pub fn is_monotone_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].t_eff <= w[0].t_eff)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_sweep_csv(&self.rows, out)
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "param,area_m2,t_eff_k,omega_cm_rad_s")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.param, r.area, r.t_eff, r.omega_cm)?;
    }
    Ok(())
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "param,area_m2,t_eff_k,omega_cm_rad_s" => {}
        _ => return Err(Error::Parse("missing sweep CSV header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("sweep CSV row {l:?}: {e}")))?;
            if v.len() != 4 {
                return Err(Error::Parse(format!("sweep CSV row {l:?} needs 4 fields")));
            }
            Ok(SweepRow {
                param: v[0],
                area: v[1],
                t_eff: v[2],
                omega_cm: v[3],
            })
        })
        .collect()
}
