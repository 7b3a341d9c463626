//! Seedable counter-based random number generator.
//!
//! `CounterRng` produces the i-th draw as `mix64(key + i * GOLDEN)` where
//! `mix64` is the SplitMix64 finalizer. Because each output is a pure
//! function of `(key, counter)`, streams are bit-reproducible across
//! platforms and can be forked without shared state: `derive` hashes a
//! string label into a child key, `derive_index` hashes an integer.
//! All randomness in the crate flows from one root seed through these
//! derivations.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix64(seed ^ GOLDEN),
            ctr: 0,
        }
    }

    /// Fork a child stream named by `label`; independent of draws taken so far.
    pub fn derive(&self, label: &str) -> Self {
        CounterRng {
            key: mix64(self.key ^ fnv1a(label.as_bytes())),
            ctr: 0,
        }
    }

    /// Fork the i-th child stream (per-patient, per-seed replicates, ...).
    pub fn derive_index(&self, i: u64) -> Self {
        CounterRng {
            key: mix64(self.key ^ mix64(i ^ 0x5bd1_e995)),
            ctr: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) via 128-bit multiply (no modulo bias worth
    /// caring about at desk scale).
    pub fn range_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Symmetric uniform in (-scale, scale).
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        self.range_f64(-scale, scale)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range_usize(i + 1);
            items.swap(i, j);
        }
    }
}
