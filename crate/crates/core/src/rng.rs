//! Portable normal variates.
//!
//! The generator is xoshiro256** seeded through SplitMix64 (`seed_from_u64`),
//! and standard normals come from the Box–Muller transform:
//!
//! ```text
//! u1 = 1 - (next_u64() >> 11) * 2^-53      in (0, 1]
//! u2 =     (next_u64() >> 11) * 2^-53      in [0, 1)
//! z0 = sqrt(-2 ln u1) * cos(2 pi u2)       returned first
//! z1 = sqrt(-2 ln u1) * sin(2 pi u2)       returned on the next call
//! ```
//!
//! Any implementation following these steps replays the same sequence.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
