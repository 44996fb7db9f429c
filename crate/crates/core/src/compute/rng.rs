use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded counter-based generator.
///
/// Backed by ChaCha8, whose output is a pure function of (key, stream, word
/// position). [`Rng::substream`] derives an independent stream for a worker,
/// trajectory, or optimizer step without consuming the parent.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator keyed by `id` under this generator's stream.
    pub fn substream(&self, id: u64) -> Rng {
        Self::with_stream(self.seed, splitmix(self.stream ^ splitmix(id.wrapping_add(1))))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn gauss_sample(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        self.fill_normal(t.data_mut());
        t
    }

    /// Uniform permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(7);
        let n = 1_000_000;
        let x = rng.gauss_sample(&[n]);
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).gauss_sample(&[1000]);
        let b = Rng::new(42).gauss_sample(&[1000]);
        assert_eq!(a.data(), b.data());
        let c = Rng::new(43).gauss_sample(&[1000]);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn substreams_are_disjoint_and_stable() {
        let root = Rng::new(1);
        let a = root.substream(0).gauss_sample(&[64]);
        let b = root.substream(1).gauss_sample(&[64]);
        assert_ne!(a.data(), b.data());
        assert_eq!(a.data(), Rng::new(1).substream(0).gauss_sample(&[64]).data());
        let nested = root.substream(0).substream(0).gauss_sample(&[64]);
        assert_ne!(nested.data(), a.data());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(3).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
