//! Closed-loop simulator of imaging-based feedback cooling of a charged
//! nanoparticle levitated in a linear Paul trap.
//!
//! The pipeline mirrors the experiment: the axial motion of the particle is
//! integrated with an exact Langevin propagator ([`dynamics`]), imaged by two
//! virtual CMOS cameras ([`imaging`]), localized per frame ([`localization`]),
//! turned into a delayed, filtered end-cap voltage ([`feedback`]) and finally
//! characterized through PSD thermometry ([`analysis`]). The [`harness`]
//! wires everything on a frame-locked clock and drives runs and sweeps.

pub mod analysis;
pub mod dynamics;
mod error;
pub mod feedback;
pub mod harness;
pub mod imaging;
pub mod localization;
mod lsq;
pub mod units;

pub use error::{Error, Result};
