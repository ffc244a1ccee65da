//! Deterministic pseudo-random streams.
//!
//! Everything stochastic in this crate (initialization, dropout masks,
//! samplers, synthetic data) draws from [`SplitMix64`] so that a fixed seed
//! reproduces runs bit for bit across platforms and releases. The generator
//! is spelled out here because split files and trained checkpoints are part
//! of the artifact's reproducibility contract:
//!
//! * state update: `s += 0x9E3779B97F4A7C15`
//! * output: `z = s; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;`
//!   `z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`
//! * unit doubles: `(next_u64() >> 11) as f64 * 2^-53`, uniform on `[0, 1)`.

/// Finalizer of the SplitMix64 output function, also used to mix seed parts.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive a stream from several seed parts (seed, domain tag, user id, ...).
    /// Parts are folded left to right: `state = mix64(state ^ mix64(part))`.
    pub fn from_parts(parts: &[u64]) -> Self {
        let mut state = 0x6A09_E667_F3BC_C909; // golden-ratio-free init constant
        for &p in parts {
            state = mix64(state ^ mix64(p));
        }
        SplitMix64 { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n64 = n as u64;
        // Reject the low `2^64 mod n` values so the modulo is exact.
        let threshold = n64.wrapping_neg() % n64;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return (r % n64) as usize;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn unit_doubles_in_range() {
        let mut r = SplitMix64::new(3);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut r = SplitMix64::new(11);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[r.below(5)] += 1;
        }
        for &c in &counts {
            let expected = n as f64 / 5.0;
            assert!((c as f64 - expected).abs() < 5.0 * (expected).sqrt());
        }
    }

    #[test]
    fn from_parts_changes_with_any_part() {
        let a = SplitMix64::from_parts(&[1, 2, 3]).next_u64();
        let b = SplitMix64::from_parts(&[1, 2, 4]).next_u64();
        let c = SplitMix64::from_parts(&[0, 2, 3]).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
