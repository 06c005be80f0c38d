//! Deterministic random numbers for everything reproducibility depends on.
//!
//! A 64-bit linear congruential generator,
//!
//! ```text
//! state' = state * 6364136223846793005 + 1442695040888963407   (mod 2^64)
//! ```
//!
//! with Knuth's MMIX constants. Draws use the high state bits (the low bits
//! of an LCG are weak): doubles take the top 53 bits, bounded integers take
//! the top 32 bits modulo the bound. Reimplementing these few lines in
//! another language reproduces every shuffle, split, and parameter
//! initialization in this crate bit for bit, which is the whole point —
//! a platform RNG would tie artifacts to one standard library.

/// Multiplier of the LCG step (Knuth, MMIX).
pub const LCG_MULTIPLIER: u64 = 6364136223846793005;
/// Increment of the LCG step (Knuth, MMIX).
pub const LCG_INCREMENT: u64 = 1442695040888963407;

/// Seeded deterministic generator. Cheap to construct; make a fresh one per
/// purpose (one for a shuffle, one for an init) rather than sharing streams.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Advance the state once and return it.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(LCG_MULTIPLIER)
            .wrapping_add(LCG_INCREMENT);
        self.state
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform double in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero and below 2^32
    /// (plenty for desk-scale datasets; keeps the draw to one state step).
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        assert!((n as u64) < (1 << 32), "bound too large for 32-bit draw");
        ((self.next_u64() >> 32) % n as u64) as usize
    }

    /// In-place Fisher–Yates shuffle, iterating from the back of the slice.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
