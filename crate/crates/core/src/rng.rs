//! Seeded pseudo-random numbers for bit-reproducible runs.
//!
//! The generator is SplitMix64 (Steele, Lea, Flood 2014): the state advances
//! by the golden-gamma constant and the output is a finalizing mix of the
//! state. It is fixed here, independent of any external crate, so that weight
//! initialization, data shuffles, and procedural textures produce identical
//! bytes on every platform and in every run with the same seed.

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Modulo bias is irrelevant at the ranges used here (n << 2^64).
        self.next_u64() % n
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash, used to derive per-name seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Independent stream for a named object under a global seed. The stream
/// depends only on (seed, name), never on creation order.
pub fn stream_for(seed: u64, name: &str) -> SplitMix64 {
    let mut s = SplitMix64::new(seed ^ fnv1a(name.as_bytes()));
    // Burn one output so nearby seeds decorrelate.
    s.next_u64();
    s
}

/// Stateless mix of a seed with 2D integer coordinates, for procedural
/// textures evaluated per pixel.
pub fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    let mut s = SplitMix64::new(
        seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    s.next_u64()
}
