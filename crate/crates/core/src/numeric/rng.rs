//! Deterministic, splittable random number generation.
//!
//! Workers, neurons and training steps each get their own stream derived
//! from `(seed, worker, step, neuron, ...)` tags, so draws never depend on
//! thread scheduling or on how many workers share the job. The generator
//! is splitmix64: a 64-bit counter stepped by a fixed increment and passed
//! through an avalanching finalizer.

use super::NumericError;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const DERIVE_SALT: u64 = 0xA076_1D64_78BD_642F;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable deterministic generator. Identical seeds give identical
/// draw sequences; [`SplitRng::derive`] forks an independent child stream
/// without advancing the parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRng {
    state: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng {
            state: mix64(seed ^ GOLDEN_GAMMA),
        }
    }

    /// Forks a child stream keyed by `tag`. Pure: the parent state is
    /// untouched, and the same `(parent, tag)` always yields the same child.
    #[inline]
    pub fn derive(&self, tag: u64) -> SplitRng {
        SplitRng {
            state: mix64(self.state ^ mix64(tag.wrapping_mul(GOLDEN_GAMMA) ^ DERIVE_SALT)),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[low, high)`.
    #[inline]
    pub fn next_in_range(&mut self, low: f64, high: f64) -> f64 {
        low + self.next_f64() * (high - low)
    }

    /// Uniform index in `[0, n)` via fixed-point scaling.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index over an empty range");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draws 1 with probability `p`, 0 otherwise, advancing the generator
/// exactly once.
#[inline]
pub fn binomial_draw(rng: &mut SplitRng, p: f64) -> Result<u8, NumericError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NumericError::ProbabilityOutOfRange(p));
    }
    Ok(u8::from(rng.next_f64() < p))
}
