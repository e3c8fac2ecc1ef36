//! splitmix64 with uniform and Box-Muller gaussian draws.

use std::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 generator. Identical seeds give identical `u64` streams
/// everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits: `(next >> 11) * 2^-53`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal from two consecutive uniforms `u1, u2`:
    /// `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. The sine branch is discarded,
    /// so every draw consumes exactly two `u64`s.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.gaussian()
    }
}

/// Independent seed for sub-stream `stream` of `seed`, mixed through
/// splitmix64 twice.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let first = Prng::new(seed).next_u64();
    Prng::new(first ^ stream.wrapping_mul(GOLDEN_GAMMA)).next_u64()
}
