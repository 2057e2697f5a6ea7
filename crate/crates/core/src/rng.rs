//! Counter-based deterministic random streams with labeled forks.
//!
//! Every draw is a pure function of `(seed, stream_id, counter)`, so a stream
//! can be reconstructed anywhere from its three words. Forking never consumes
//! draws from the parent: the child depends only on the parent's identity and
//! the label.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, 64 bit. Stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    k1: u64,
    k2: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
            k1: mix64(seed ^ GOLDEN),
            k2: mix64(stream_id.wrapping_add(0x632B_E59B_D9B4_E019)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive a child stream. Deterministic in `(seed, stream_id, label)`.
    ///
    /// Panics on an empty label.
    pub fn fork(&self, label: &str) -> RngStream {
        assert!(!label.is_empty(), "rng fork label must be nonempty");
        let child = mix64(self.stream_id.rotate_left(17) ^ mix64(fnv1a(label.as_bytes())));
        RngStream::with_stream(self.seed, child)
    }

    pub fn fork_indexed(&self, label: &str, index: u64) -> RngStream {
        self.fork(&format!("{label}/{index}"))
    }

    #[inline]
    fn draw(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(mix64(c.wrapping_mul(GOLDEN) ^ self.k1) ^ self.k2)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.draw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in [0, n). Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift; bias is below 2^-32 for the sizes used here.
        ((u128::from(self.draw()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.draw().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
