//! Seeded pseudo-random generator shared by fixtures, mocks and jitter.
//!
//! The algorithm is fixed so that any implementation can reproduce the same
//! schedules bit-for-bit:
//!
//! * Seeding expands the 64-bit seed with one SplitMix64 step
//!   (`z += 0x9E3779B97F4A7C15; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^= z >> 31`). A zero result is
//!   replaced by `0x9E3779B97F4A7C15` because xorshift state must be nonzero.
//! * Each draw is xorshift64* (Vigna 2016): `x ^= x >> 12; x ^= x << 25;
//!   x ^= x >> 27; out = x * 0x2545F4914F6CDD1D` (wrapping).
//! * `next_f64` takes the top 53 bits of a draw and scales by 2^-53, giving a
//!   value in `[0, 1)`.
//! * `below(n)` uses rejection sampling on the 64-bit output so every value in
//!   `0..n` is equally likely.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MUL1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MUL2: u64 = 0x94D0_49BB_1331_11EB;
const XORSHIFT_STAR_MUL: u64 = 0x2545_F491_4F6C_DD1D;

/// xorshift64* generator with SplitMix64 seeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(SPLITMIX_GAMMA);
        z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
        z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
        z ^= z >> 31;
        if z == 0 {
            z = SPLITMIX_GAMMA;
        }
        Self { state: z }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_STAR_MUL)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Largest multiple of n that fits; values at or above it are rejected.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        let span = (hi as i128 - lo as i128 + 1) as u128;
        if span > u64::MAX as u128 {
            return self.next_u64() as i64;
        }
        lo + self.below(span as u64) as i64
    }

    /// Uniform real in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fisher-Yates shuffle, iterating from the end.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = XorShift64Star::new(42);
        let mut b = XorShift64Star::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn first_draws_are_frozen() {
        // Reference values computed by hand-running the documented recurrences
        // (see module docs); a change here breaks every frozen schedule.
        let mut r = XorShift64Star::new(0);
        let seeded = {
            let mut z = 0u64.wrapping_add(SPLITMIX_GAMMA);
            z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
            z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
            z ^ (z >> 31)
        };
        assert_eq!(seeded, 0xE220_A839_7B1D_CDAF);
        let mut x = seeded;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        assert_eq!(r.next_u64(), x.wrapping_mul(XORSHIFT_STAR_MUL));
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut r = XorShift64Star::new(7);
        for _ in 0..10_000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut r = XorShift64Star::new(3);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            seen[r.below(5) as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = XorShift64Star::new(11);
        let mut v: Vec<u32> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
