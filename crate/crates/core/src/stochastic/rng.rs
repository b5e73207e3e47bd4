use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::concrete::UNIFORM_EPS;

/// Counter-based random stream keyed by `(seed, stream id)`.
///
/// Two streams with the same key yield the same sequence, and [`RngStream::at`]
/// jumps straight to a given uniform draw index.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream positioned just before uniform draw number `index`.
    pub fn at(seed: u64, stream: u64, index: u64) -> Self {
        let mut s = Self::new(seed, stream);
        // each f64 consumes one u64, i.e. two 32-bit words
        s.rng.set_word_pos(u128::from(index) * 2);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream; same parent and tag give the same child.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(self.seed, mix(self.stream ^ mix(tag)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform clamped to `(UNIFORM_EPS, 1 - UNIFORM_EPS)`, safe for a logit.
    pub fn open_uniform(&mut self) -> f64 {
        self.uniform().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Source of open-interval uniforms driving gate sampling.
pub trait UniformSource {
    /// Uniform in `(UNIFORM_EPS, 1 - UNIFORM_EPS)`.
    fn next_open_uniform(&mut self) -> f64;
}

impl UniformSource for RngStream {
    fn next_open_uniform(&mut self) -> f64 {
        self.open_uniform()
    }
}

/// Replays a fixed list of uniforms, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct FixedUniforms {
    values: Vec<f64>,
    next: usize,
}

impl FixedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "FixedUniforms needs at least one value");
        Self { values, next: 0 }
    }
}

impl UniformSource for FixedUniforms {
    fn next_open_uniform(&mut self) -> f64 {
        let v = self.values[self.next % self.values.len()];
        self.next += 1;
        v.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }
}
