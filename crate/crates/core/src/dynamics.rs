//! Axial Langevin dynamics of the trapped particle.
//!
//! The equation of motion is
//!
//! ```text
//! m z'' = -m w0^2 z - m gamma z' + F_ext + F_noise
//! ```
//!
//! with `F_noise` white, one-sided force PSD `S_F` (N^2/Hz). Because the
//! system is linear with a zero-order-hold external force, each step uses
//! the exact Gaussian propagator: the mean follows the deterministic
//! solution about the static deflection `F_ext / (m w0^2)` and the
//! covariance is `Q(h) = P - Phi(h) P Phi(h)^T` with `P` the stationary
//! covariance. The propagator has no step-size bias, so a physics step may
//! be as long as a camera frame period.
//!
//! Gas damping uses Epstein's free-molecular drag for diffuse reflection
//! with full accommodation:
//!
//! ```text
//! gamma = (1 + 8/pi) * p / (rho * r * v_gas),   v_gas = sqrt(8 k_B T / (pi m_gas))
//! ```

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::units::{AIR_MOLECULAR_MASS, ELEMENTARY_CHARGE, K_B, PA_PER_MBAR};
use crate::{Error, Result};

/// Epstein drag coefficient for diffuse reflection, `1 + 8/pi`.
pub const EPSTEIN_COEFFICIENT: f64 = 1.0 + 8.0 / PI;

/// Below this value of `gamma * dt` the undamped covariance closed form is
/// used instead of the stationary-difference form, which cancels badly.
const WEAK_DAMPING_LIMIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleProps {
    /// Sphere diameter, m.
    pub diameter: f64,
    /// Mass density, kg/m^3.
    pub density: f64,
    /// Net charge in elementary charges, sign included.
    pub charge_number: i64,
}

impl Default for ParticleProps {
    fn default() -> Self {
        ParticleProps {
            diameter: 450e-9,
            density: 2200.0,
            charge_number: 500,
        }
    }
}

impl ParticleProps {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return Err(Error::config(format!(
                "particle diameter must be > 0, got {}",
                self.diameter
            )));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::config(format!(
                "particle density must be > 0, got {}",
                self.density
            )));
        }
        Ok(())
    }

    /// Sphere mass, always recomputed from diameter and density.
    pub fn mass(&self) -> f64 {
        self.density * PI * self.diameter.powi(3) / 6.0
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    /// Charge in coulombs.
    pub fn charge(&self) -> f64 {
        self.charge_number as f64 * ELEMENTARY_CHARGE
    }
}

/// Sphere mass `rho * pi * d^3 / 6`.
pub fn particle_mass(props: &ParticleProps) -> Result<f64> {
    props.validate()?;
    Ok(props.mass())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    /// Axial secular angular frequency, rad/s.
    pub omega0: f64,
    /// Trap center to end-cap distance, m.
    pub z0: f64,
    /// Trap center to AC electrode distance, m.
    pub r0: f64,
    /// AC drive frequency, Hz (metadata).
    pub drive_freq: f64,
    /// Static end-cap voltage V1 = V2, V.
    pub v_endcap: f64,
    /// AC peak-to-peak voltage, V (metadata).
    pub v_ac_pp: f64,
    /// Accepted range of `omega0 / 2pi`, Hz.
    pub validity_band_hz: (f64, f64),
}

impl Default for TrapConfig {
    fn default() -> Self {
        TrapConfig {
            omega0: 2.0 * PI * 23.5,
            z0: 7e-3,
            r0: 6e-3,
            drive_freq: 600.0,
            v_endcap: 10.0,
            v_ac_pp: 600.0,
            validity_band_hz: (5.0, 500.0),
        }
    }
}

impl TrapConfig {
    pub fn f0(&self) -> f64 {
        self.omega0 / (2.0 * PI)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::config(format!("omega0 must be > 0, got {}", self.omega0)));
        }
        if !(self.z0 > 0.0 && self.r0 > 0.0) {
            return Err(Error::config("trap geometry lengths must be > 0"));
        }
        let (lo, hi) = self.validity_band_hz;
        let f0 = self.f0();
        if f0 < lo || f0 > hi {
            return Err(Error::config(format!(
                "axial frequency {f0} Hz outside validity band [{lo}, {hi}] Hz"
            )));
        }
        if !(20.0..=40.0).contains(&f0) {
            log::warn!("axial frequency {f0:.2} Hz is outside the typical 20-40 Hz range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// Gas pressure, mbar.
    pub pressure_mbar: f64,
    /// Bath temperature, K.
    pub bath_temperature: f64,
    /// Gas molecular mass, kg.
    pub gas_molecular_mass: f64,
    /// Pressure-independent excess force noise, one-sided N^2/Hz.
    pub excess_force_psd: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Environment {
            pressure_mbar: 1e-4,
            bath_temperature: 300.0,
            gas_molecular_mass: AIR_MOLECULAR_MASS,
            excess_force_psd: 0.0,
        }
    }
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        if !(self.pressure_mbar >= 0.0 && self.pressure_mbar.is_finite()) {
            return Err(Error::config(format!(
                "pressure must be >= 0, got {}",
                self.pressure_mbar
            )));
        }
        if !(self.bath_temperature > 0.0 && self.bath_temperature.is_finite()) {
            return Err(Error::config("bath temperature must be > 0"));
        }
        if !(self.gas_molecular_mass > 0.0) {
            return Err(Error::config("gas molecular mass must be > 0"));
        }
        if !(self.excess_force_psd >= 0.0 && self.excess_force_psd.is_finite()) {
            return Err(Error::config("excess force PSD must be >= 0"));
        }
        Ok(())
    }

    /// Mean thermal speed of the gas molecules, m/s.
    pub fn mean_gas_speed(&self) -> f64 {
        (8.0 * K_B * self.bath_temperature / (PI * self.gas_molecular_mass)).sqrt()
    }
}

/// Free-molecular (Epstein) damping rate, 1/s. Strictly proportional to pressure.
pub fn gas_damping_rate(env: &Environment, props: &ParticleProps) -> Result<f64> {
    env.validate()?;
    props.validate()?;
    let pressure_pa = env.pressure_mbar * PA_PER_MBAR;
    Ok(EPSTEIN_COEFFICIENT * pressure_pa
        / (props.density * props.radius() * env.mean_gas_speed()))
}

/// One-sided thermal force PSD `4 k_B T m gamma`, N^2/Hz.
pub fn thermal_force_psd(gamma: f64, mass: f64, temperature: f64) -> f64 {
    4.0 * K_B * temperature * mass * gamma
}

/// Temperature at which the free oscillator equilibrates when both the gas
/// bath and the excess force noise act on it.
pub fn stationary_temperature(env: &Environment, gamma: f64, mass: f64) -> f64 {
    if gamma > 0.0 {
        env.bath_temperature + env.excess_force_psd / (4.0 * K_B * mass * gamma)
    } else if env.excess_force_psd > 0.0 {
        f64::INFINITY
    } else {
        env.bath_temperature
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    /// Axial position relative to the trap center, m.
    pub z: f64,
    /// Axial velocity, m/s.
    pub v: f64,
    /// Simulation time, s.
    pub t: f64,
}

impl ParticleState {
    pub fn at_rest(t: f64) -> Self {
        ParticleState { z: 0.0, v: 0.0, t }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.v.is_finite() && self.t.is_finite()
    }
}

/// Exact one-step propagator of the damped oscillator for a fixed `dt`.
#[derive(Debug, Clone, Copy)]
pub struct Propagator {
    omega0: f64,
    gamma: f64,
    dt: f64,
    /// State transition matrix, row-major `[[zz, zv], [vz, vv]]`.
    phi: [[f64; 2]; 2],
    /// Covariance of the step noise per unit velocity-diffusion rate.
    unit_cov: [[f64; 2]; 2],
}

impl Propagator {
    pub fn new(omega0: f64, gamma: f64, dt: f64) -> Self {
        let half = 0.5 * gamma;
        let disc = omega0 * omega0 - half * half;
        // c = cos(W dt) and s = sin(W dt)/W, continued through W = 0 to the
        // critically damped and overdamped branches.
        let (c, s) = if disc > 1e-12 * omega0 * omega0 {
            let w = disc.sqrt();
            ((w * dt).cos(), (w * dt).sin() / w)
        } else if disc < -1e-12 * omega0 * omega0 {
            let w = (-disc).sqrt();
            ((w * dt).cosh(), (w * dt).sinh() / w)
        } else {
            (1.0, dt)
        };
        let e = (-half * dt).exp();
        let phi = [
            [e * (c + half * s), e * s],
            [-omega0 * omega0 * e * s, e * (c - half * s)],
        ];

        let unit_cov = if gamma * dt > WEAK_DAMPING_LIMIT {
            // Stationary covariance for unit diffusion: diag(1/(2 g w0^2), 1/(2 g)).
            let pz = 0.5 / (gamma * omega0 * omega0);
            let pv = 0.5 / gamma;
            let q11 = pz - (phi[0][0] * phi[0][0] * pz + phi[0][1] * phi[0][1] * pv);
            let q12 = -(phi[0][0] * phi[1][0] * pz + phi[0][1] * phi[1][1] * pv);
            let q22 = pv - (phi[1][0] * phi[1][0] * pz + phi[1][1] * phi[1][1] * pv);
            [[q11, q12], [q12, q22]]
        } else {
            let w = omega0;
            let s2 = (2.0 * w * dt).sin() / (4.0 * w);
            let q11 = (0.5 * dt - s2) / (w * w);
            let q12 = (w * dt).sin().powi(2) / (2.0 * w * w);
            let q22 = 0.5 * dt + s2;
            [[q11, q12], [q12, q22]]
        };

        Propagator {
            omega0,
            gamma,
            dt,
            phi,
            unit_cov,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> [[f64; 2]; 2] {
        self.phi
    }

    /// Step covariance of `(z, v)` for a one-sided force PSD `psd` on mass `mass`.
    pub fn covariance(&self, psd: f64, mass: f64) -> [[f64; 2]; 2] {
        let d = velocity_diffusion(psd, mass);
        let q = self.unit_cov;
        [[d * q[0][0], d * q[0][1]], [d * q[1][0], d * q[1][1]]]
    }

    /// Deterministic part of the step under a constant external force.
    pub fn mean(&self, state: &ParticleState, force: f64, mass: f64) -> ParticleState {
        let z_eq = force / (mass * self.omega0 * self.omega0);
        let dz = state.z - z_eq;
        ParticleState {
            z: z_eq + self.phi[0][0] * dz + self.phi[0][1] * state.v,
            v: self.phi[1][0] * dz + self.phi[1][1] * state.v,
            t: state.t + self.dt,
        }
    }

    /// Random increment `(dz, dv)` drawn for one noise source.
    pub fn noise<R: Rng + ?Sized>(&self, psd: f64, mass: f64, rng: &mut R) -> (f64, f64) {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        if psd <= 0.0 {
            return (0.0, 0.0);
        }
        let q = self.covariance(psd, mass);
        let l11 = q[0][0].max(0.0).sqrt();
        let l21 = if l11 > 0.0 { q[0][1] / l11 } else { 0.0 };
        let l22 = (q[1][1] - l21 * l21).max(0.0).sqrt();
        (l11 * n1, l21 * n1 + l22 * n2)
    }
}

/// Velocity diffusion rate `S_F / (2 m^2)` for a one-sided force PSD.
fn velocity_diffusion(psd: f64, mass: f64) -> f64 {
    psd / (2.0 * mass * mass)
}

/// Per-step parameters shared by [`step`] and the harness.
#[derive(Debug, Clone, Copy)]
pub struct Plant {
    pub mass: f64,
    pub omega0: f64,
    pub gamma: f64,
}

impl Plant {
    pub fn new(props: &ParticleProps, trap: &TrapConfig, env: &Environment) -> Result<Self> {
        trap.validate()?;
        Ok(Plant {
            mass: particle_mass(props)?,
            omega0: trap.omega0,
            gamma: gas_damping_rate(env, props)?,
        })
    }

    /// Variance of `z` for a bath at `temperature`, `k_B T / (m w0^2)`.
    pub fn thermal_variance(&self, temperature: f64) -> f64 {
        K_B * temperature / (self.mass * self.omega0 * self.omega0)
    }
}

/// Advances the state by `dt` with the external force held constant.
pub fn step<R: Rng + ?Sized>(
    plant: &Plant,
    state: &ParticleState,
    dt: f64,
    external_force: f64,
    noise_psd_total: f64,
    rng: &mut R,
) -> Result<ParticleState> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("step dt must be > 0, got {dt}")));
    }
    let prop = Propagator::new(plant.omega0, plant.gamma, dt);
    let mut next = prop.mean(state, external_force, plant.mass);
    let (dz, dv) = prop.noise(noise_psd_total, plant.mass, rng);
    next.z += dz;
    next.v += dv;
    if !next.is_finite() {
        return Err(Error::IntegrationFault { t: state.t });
    }
    Ok(next)
}

/// Draws an equilibrium state at `temperature`.
pub fn thermal_init<R: Rng + ?Sized>(
    mass: f64,
    omega0: f64,
    temperature: f64,
    rng: &mut R,
) -> ParticleState {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    if !(temperature > 0.0) {
        return ParticleState::at_rest(0.0);
    }
    let sigma_v = (K_B * temperature / mass).sqrt();
    ParticleState {
        z: sigma_v / omega0 * n1,
        v: sigma_v * n2,
        t: 0.0,
    }
}
