use thiserror::Error;

use crate::imaging::CameraLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Best iterate of a Gaussian fit that did not converge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitIterate {
    pub amplitude: f64,
    pub x0_px: f64,
    pub z0_px: f64,
    pub sigma_px: f64,
    pub offset: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integration fault at t = {t} s: non-finite state")]
    IntegrationFault { t: f64 },

    #[error("particle lost from the {camera} camera ROI at t = {t} s (image center {center_px} px)")]
    ParticleLost {
        camera: CameraLabel,
        t: f64,
        center_px: f64,
    },

    #[error("insufficient signal for {0}")]
    LowSignal(&'static str),

    #[error("gaussian fit did not converge after {iterations} iterations")]
    FitFailed {
        iterations: usize,
        best: FitIterate,
    },

    #[error("degenerate gaussian fit: sigma collapsed to {sigma_px} px")]
    DegenerateFit { sigma_px: f64 },

    #[error("insufficient calibration shift: {displacement_px} px (need at least 0.5 px)")]
    InsufficientShift { displacement_px: f64 },

    #[error("out-of-order sample: t = {t} s is not after {last} s")]
    Sequencing { t: f64, last: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("frequency band out of range: {0}")]
    Range(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
