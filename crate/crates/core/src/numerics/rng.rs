//! Deterministic, splittable random number generation.
//!
//! The generator is SplitMix64: the 64-bit state advances by the golden-ratio
//! increment and each output is the finalizer mix of the new state. A stream
//! id is folded into the initial state through the same mixing function, so
//! `(seed, stream)` pairs address statistically independent sequences and
//! child streams can be derived without consuming draws from the parent.
//! Gaussians come from the Box-Muller transform. Reproducibility is bit-exact
//! within one build of the artifact.

use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    state: u64,
    /// Spare Box-Muller deviate, bit-stored so the struct stays `Eq`.
    spare: Option<u64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let state = mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)));
        SeededRng {
            seed,
            stream,
            state,
            spare: None,
        }
    }

    /// Derive an independent child stream. Children are addressed by id, not
    /// by draw position, so deriving is insensitive to how many values the
    /// parent has produced.
    pub fn derive(&self, child: u64) -> SeededRng {
        SeededRng::new(self.seed, mix64(self.stream ^ mix64(child)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Raw generator state, for checkpointing.
    pub fn state_words(&self) -> [u64; 2] {
        [self.state, self.stream]
    }

    /// Rebuild from checkpointed words. The spare Gaussian is not persisted;
    /// a restored generator restarts Box-Muller pairing.
    pub fn from_state_words(seed: u64, words: [u64; 2]) -> Self {
        SeededRng {
            seed,
            stream: words[1],
            state: words[0],
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift bounds the result to [0, n) without modulo bias
        // beyond 2^-64, which is irrelevant at desk scale.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; deviates are produced in pairs and
    /// the spare is cached.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(bits) = self.spare.take() {
            return f64::from_bits(bits);
        }
        // Shift into (0, 1] so the log argument is never zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = core::f64::consts::TAU * u2;
        let z0 = r * libm::cos(theta);
        let z1 = r * libm::sin(theta);
        self.spare = Some(z1.to_bits());
        z0
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: after k swaps the prefix is the sample.
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

/// Tensor of i.i.d. standard-normal entries, deterministic under the rng.
pub fn sample_gaussian<E: Element>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.next_gaussian())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(42, 7);
        let mut b = SeededRng::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = SeededRng::new(42, 0);
        let mut b = SeededRng::new(42, 1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn derive_is_insensitive_to_parent_draws() {
        let parent = SeededRng::new(9, 3);
        let mut drained = parent.clone();
        for _ in 0..10 {
            drained.next_u64();
        }
        assert_eq!(parent.derive(5), drained.derive(5));
    }

    #[test]
    fn gaussian_tensor_deterministic() {
        let a: Tensor<f64> = sample_gaussian(&mut SeededRng::new(1, 2), &[3, 4]);
        let b: Tensor<f64> = sample_gaussian(&mut SeededRng::new(1, 2), &[3, 4]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(2024, 0);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn empty_shape_gives_empty_tensor() {
        let t: Tensor<f32> = sample_gaussian(&mut SeededRng::new(0, 0), &[0]);
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn choose_indices_uniform_coverage() {
        let mut rng = SeededRng::new(5, 5);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for i in rng.choose_indices(10, 2) {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.02, "index {i}: freq {freq}");
        }
    }

    #[test]
    fn uniform_in_range() {
        let mut rng = SeededRng::new(11, 0);
        for _ in 0..1000 {
            let x = rng.uniform(0.5, 5.0);
            assert!((0.5..5.0).contains(&x));
        }
    }
}
