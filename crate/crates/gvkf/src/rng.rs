//! Small deterministic PRNG (SplitMix64).
//!
//! Used for seeded initialization of voxel features and decoder weights.
//! Deterministic across platforms; each consumer derives its own stream by
//! hashing a seed with a tag, so insertion order never affects the values.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derives an independent stream from `seed` and an arbitrary tag.
    pub fn derived(seed: u64, tag: &[u64]) -> Self {
        let mut s = SplitMix64::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut acc = s.next_u64();
        for &t in tag {
            acc = acc.wrapping_add(t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            acc ^= acc >> 31;
        }
        SplitMix64::new(acc)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}
