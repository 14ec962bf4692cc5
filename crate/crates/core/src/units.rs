//! Physical constants (CODATA 2018 exact values where defined).

/// Boltzmann constant, J/K.
pub const K_B: f64 = 1.380_649e-23;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Unified atomic mass unit, kg.
pub const AMU: f64 = 1.660_539_066_60e-27;

/// Mean molecular mass of dry air, kg.
pub const AIR_MOLECULAR_MASS: f64 = 28.97 * AMU;

/// Pascal per millibar.
pub const PA_PER_MBAR: f64 = 100.0;
