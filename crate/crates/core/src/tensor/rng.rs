//! Seedable PCG32 random number generator (XSH-RR 64/32 variant).
//!
//! Every random decision in the library — parameter init, epoch shuffles,
//! dropout masks, augmentation, synthetic data — draws from one of these
//! generators, each constructed from the experiment seed plus a *stream id*
//! that encodes what the numbers are for (see [`streams`]). Because streams
//! are derived from stable quantities (training clock, tower index, epoch) and
//! never from prior draws, any point of a run can be reproduced from the seed
//! alone, which is what makes checkpoint resumption bit-exact.

/// PCG32 generator: 64-bit state, 64-bit stream selector, 32-bit output.
#[derive(Clone, Debug)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;

impl Pcg32 {
    /// Creates a generator from a seed and a stream selector.
    ///
    /// Distinct streams yield statistically independent sequences for the same
    /// seed.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    /// Creates a generator for a purpose-tagged stream; see [`streams`].
    pub fn for_stream(seed: u64, domain: u16, payload: u64) -> Self {
        Pcg32::new(seed, streams::stream_id(domain, payload))
    }

    /// Next 32 uniformly random bits.
    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Next 64 uniformly random bits (high word drawn first).
    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform draw from `(0, 1]` with 53-bit resolution.
    ///
    /// The open lower bound means the result is always safe to pass to `ln`.
    pub fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[lo, hi)` (up to the lattice of `next_f64`).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        // 1 − next_f64() ∈ [0, 1), which keeps `lo` reachable and `hi` not.
        lo + (hi - lo) * (1.0 - self.next_f64())
    }

    /// Normal draw via the Box–Muller transform (cosine branch).
    ///
    /// Consumes exactly two `u64` draws per call, so the consumption pattern
    /// is independent of the values produced.
    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        let u1 = self.next_f64(); // (0, 1]: ln is finite
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        mean + std_dev * radius * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform draw from `0..bound` without modulo bias.
    pub fn bounded(&mut self, bound: u32) -> u32 {
        debug_assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Uniformly random permutation in place (Fisher–Yates).
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.bounded((i + 1) as u32) as usize;
            xs.swap(i, j);
        }
    }
}

/// Stream-id scheme: the high 16 bits name the purpose of the stream, the low
/// 48 bits carry purpose-specific context (clock, tower index, epoch, …).
pub mod streams {
    /// Parameter initialization; payload 0.
    pub const INIT: u16 = 1;
    /// Epoch shuffling; payload = epoch index.
    pub const SHUFFLE: u16 = 2;
    /// Train-time randomness (dropout); payload = clock · 64 + tower index.
    pub const TRAIN: u16 = 3;
    /// Data augmentation; payload = clock.
    pub const AUGMENT: u16 = 4;
    /// Synthetic dataset generation; payload 0.
    pub const SYNTHETIC: u16 = 5;

    /// Packs a domain tag and payload into a 64-bit stream selector.
    pub fn stream_id(domain: u16, payload: u64) -> u64 {
        debug_assert!(payload < (1 << 48), "stream payload exceeds 48 bits");
        ((domain as u64) << 48) | (payload & ((1 << 48) - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_sequence() {
        // First outputs of the PCG32 reference implementation for seed 42,
        // stream 54, cross-checked against an independent implementation.
        let mut rng = Pcg32::new(42, 54);
        let got: Vec<u32> = (0..6).map(|_| rng.next_u32()).collect();
        assert_eq!(
            got,
            vec![0xa15c_02b7, 0x7b47_f409, 0xba1d_3330, 0x83d2_f293, 0xbfa4_784b, 0xcbed_606e]
        );
    }

    #[test]
    fn stream_composition_is_deterministic() {
        // Frozen from an independent implementation: seed 7, domain 3,
        // payload 5·64+2.
        let mut rng = Pcg32::for_stream(7, 3, 5 * 64 + 2);
        let got: Vec<u32> = (0..3).map(|_| rng.next_u32()).collect();
        assert_eq!(got, vec![3_453_594_739, 2_723_184_360, 800_855_778]);
    }

    #[test]
    fn next_f64_matches_bit_construction() {
        // Frozen from an independent implementation: seed 1, stream 0 yields
        // u32 pair (3795398737, 17903413) → 0.8836851308597644.
        let mut rng = Pcg32::new(1, 0);
        assert_eq!(rng.next_f64(), 0.883_685_130_859_764_4);
    }

    #[test]
    fn same_seed_same_sequence_distinct_streams_differ() {
        let mut a = Pcg32::new(9, 1);
        let mut b = Pcg32::new(9, 1);
        let mut c = Pcg32::new(9, 2);
        let sa: Vec<u32> = (0..8).map(|_| a.next_u32()).collect();
        let sb: Vec<u32> = (0..8).map(|_| b.next_u32()).collect();
        let sc: Vec<u32> = (0..8).map(|_| c.next_u32()).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
    }

    #[test]
    fn uniform_stays_in_range_and_reaches_low_end() {
        let mut rng = Pcg32::new(3, 3);
        for _ in 0..10_000 {
            let v = rng.uniform(-0.5, 0.5);
            assert!((-0.5..0.5).contains(&v));
        }
    }

    #[test]
    fn bounded_is_in_range_and_roughly_uniform() {
        let mut rng = Pcg32::new(11, 0);
        let mut counts = [0u32; 5];
        for _ in 0..50_000 {
            counts[rng.bounded(5) as usize] += 1;
        }
        for &c in &counts {
            assert!((9_000..11_000).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Pcg32::new(5, 0);
        let mut xs: Vec<u32> = (0..100).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(xs, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = Pcg32::new(17, 0);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal(2.0, 3.0)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((var - 9.0).abs() < 0.2, "var {var}");
    }
}
