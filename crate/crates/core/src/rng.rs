//! Deterministic counter-based RNG for reproducible simulation.
//!
//! Every consumer derives its own stream from the master seed and a list of
//! integer tags (unit, agent, round, purpose). Draws are a pure function of
//! (key, counter), so results do not depend on scheduling or thread count.
//! Not cryptographically secure.

/// Stream-purpose tags, kept in one place so two call sites can never
/// accidentally share a stream.
pub mod stream {
    pub const DATA_FEATURES: u64 = 1;
    pub const DATA_NOISE: u64 = 2;
    pub const DATA_COVARIANCE: u64 = 3;
    pub const DATA_GROUND_TRUTH: u64 = 4;
    pub const DATA_SHIFT: u64 = 5;
    pub const DATA_TEST: u64 = 6;
    pub const AGENT_SCHEDULE: u64 = 7;
    pub const PARTICIPANTS: u64 = 8;
    pub const BATCH: u64 = 9;
    pub const LINK_NOISE: u64 = 10;
    pub const MASK_PRG: u64 = 11;
    pub const DH_SECRET: u64 = 12;
    pub const INIT_MODEL: u64 = 13;
    pub const PARTITION: u64 = 14;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: output `j` of a stream is `mix(key, j)`.
#[derive(Clone, Debug)]
pub struct DetRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed ^ GOLDEN),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive a stream from a master seed and a list of tags.
    pub fn keyed(master: u64, tags: &[u64]) -> Self {
        let mut key = splitmix64(master ^ GOLDEN);
        for &t in tags {
            key = splitmix64(key ^ t.wrapping_mul(GOLDEN));
        }
        Self {
            key,
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        // 53 random bits; +0.5 keeps the value strictly inside (0, 1).
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling to avoid modulo bias.
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    /// Uniform integer in the inclusive range [lo, hi].
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.index((hi - lo + 1) as usize) as u64
    }

    /// Standard normal via Box-Muller (spare value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Laplace(0, b) via inverse CDF: q uniform in (-1/2, 1/2),
    /// x = b * sign(q) * ln(1 - 2|q|). Variance is 2 b^2.
    pub fn laplace(&mut self, scale_b: f64) -> f64 {
        let q = self.next_f64() - 0.5;
        if q == 0.0 {
            return 0.0;
        }
        scale_b * q.signum() * (1.0 - 2.0 * q.abs()).ln()
    }

    /// Sample k distinct indices from [0, n) uniformly without replacement.
    /// Partial Fisher-Yates; output order is the draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = DetRng::keyed(42, &[1, 2, 3]);
        let mut b = DetRng::keyed(42, &[1, 2, 3]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_tags_differ() {
        let mut a = DetRng::keyed(42, &[1, 2, 3]);
        let mut b = DetRng::keyed(42, &[1, 2, 4]);
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_open_interval() {
        let mut rng = DetRng::new(7);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn sample_without_replacement_distinct() {
        let mut rng = DetRng::new(11);
        for _ in 0..100 {
            let s = rng.sample_without_replacement(100, 11);
            assert_eq!(s.len(), 11);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 11);
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = DetRng::new(3);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
