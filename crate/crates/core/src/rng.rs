//! Seeded, platform-independent randomness.
//!
//! The generator is xorshift64* (Vigna, "An experimental exploration of
//! Marsaglia's xorshift generators", shifts 12/25/27, multiplier
//! `0x2545F4914F6CDD1D`). The 64-bit seed is expanded with one SplitMix64
//! round so that seed 0 yields a non-zero state. Gaussian samples use the
//! two-output Box–Muller transform; an odd trailing sample discards its
//! partner. This algorithm is frozen: changing it changes every golden
//! output.

use crate::error::Result;
use crate::grid::LatentGrid;

const XORSHIFT_MULT: u64 = 0x2545_F491_4F6C_DD1D;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            state = XORSHIFT_MULT;
        }
        Self { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_f64() * n as f64) as usize % n
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    fn box_muller_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        (radius * angle.cos(), radius * angle.sin())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.box_muller_pair().0
    }

    /// Fills `out` with i.i.d. standard normals.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.box_muller_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.box_muller_pair().0;
        }
    }

    /// A `c × h × w` grid of standard-normal draws.
    pub fn gaussian(&mut self, shape: (usize, usize, usize)) -> Result<LatentGrid> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return crate::error::invalid(format!("gaussian shape must be positive, got {c}x{h}x{w}"));
        }
        let mut data = vec![0.0; c * h * w];
        self.fill_gaussian(&mut data);
        LatentGrid::new(c, h, w, data)
    }
}

/// Draws a standard-normal grid of the given shape from `rng`.
pub fn rng_gaussian(rng: &mut Rng, shape: (usize, usize, usize)) -> Result<LatentGrid> {
    rng.gaussian(shape)
}
