//! Integer-tick loop clock shared by both cameras.

use crate::imaging::{gcd, Fps};
use crate::{Error, Result};

/// Ticks per second are the least common multiple of the (reduced) frame
/// rate numerators, so every frame start of every camera is an integer tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopClock {
    ticks_per_second: u64,
}

impl LoopClock {
    pub fn new(rates: &[Fps]) -> Result<Self> {
        let mut l: u64 = 1;
        for r in rates {
            let n = r.num();
            l = (l / gcd(l, n))
                .checked_mul(n)
                .ok_or_else(|| Error::config("frame rates have no representable common tick"))?;
        }
        Ok(LoopClock { ticks_per_second: l })
    }

    pub fn ticks_per_second(&self) -> u64 {
        self.ticks_per_second
    }

    /// Start tick of frame `k`: `k * den * L / num`, exact.
    pub fn frame_start_tick(&self, fps: Fps, k: u64) -> u128 {
        k as u128 * fps.den() as u128 * (self.ticks_per_second / fps.num()) as u128
    }

    pub fn tick_to_seconds(&self, tick: u128) -> f64 {
        let l = self.ticks_per_second as u128;
        (tick / l) as f64 + (tick % l) as f64 / l as f64
    }

    /// Exposure midpoint of frame `k`, `(k + exposure / 2) / fps`, derived
    /// from `k` directly so nothing accumulates.
    pub fn frame_midpoint(&self, fps: Fps, k: u64, exposure: f64) -> f64 {
        (k as f64 + 0.5 * exposure) * fps.den() as f64 / fps.num() as f64
    }
}
