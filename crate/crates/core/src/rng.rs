//! Deterministic, splittable random streams.
//!
//! Every stochastic routine in the crate takes an explicit stream. Independent
//! streams are derived by *splitting* with a label rather than by draw order,
//! so results do not change when work is reordered or spread across threads.
//! The underlying generator (ChaCha8) is counter-based: a stream's output is a
//! pure function of its key and draw position.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; scrambles labels into child keys.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash. Used for string labels and config digests;
/// intentionally independent of `std` hashers so values never drift.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named position in a tree of deterministic random streams.
///
/// `split` derives an independent child; drawing from one stream never
/// affects another. Clone is cheap and copies the draw position.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self { key: seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Child stream for `label`, independent of this stream's draw position.
    pub fn split(&self, label: u64) -> Self {
        Self::from_seed(mix(self.key ^ mix(label)))
    }

    /// Child stream addressed by several labels at once.
    pub fn split_many(&self, labels: &[u64]) -> Self {
        let mut s = self.key;
        for &l in labels {
            s = mix(s ^ mix(l));
        }
        Self::from_seed(s)
    }

    /// Child stream for a string label.
    pub fn split_str(&self, label: &str) -> Self {
        self.split(fnv1a(label.as_bytes()))
    }

    pub fn u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn f64(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Bernoulli draw that always consumes exactly one value, so paired
    /// streams stay aligned even when `p` is 0 or 1.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.f64() < p
    }

    /// `k` distinct values from `0..n`, in draw order (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from 0..{n}");
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = i + self.rng.random_range(0..n - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
        out
    }
}
