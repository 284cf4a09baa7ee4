//! Seedable, portable randomness.
//!
//! Every component draws from its own ChaCha8 stream keyed by the experiment
//! seed, so data generation, weight initialization and shuffling can be
//! replayed independently of each other.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named stream for each randomized component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    DataGen,
    Extractor,
    WeightInit,
    Shuffle,
    Exemplars,
    Split,
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::DataGen => 1,
            Stream::Extractor => 2,
            Stream::WeightInit => 3,
            Stream::Shuffle => 4,
            Stream::Exemplars => 5,
            Stream::Split => 6,
            Stream::Custom(n) => 1 << 32 | n,
        }
    }
}

/// ChaCha8 generator tagged with the seed and stream it was built from.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for `stream`, independent of the parent's position.
    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        let id = stream.id();
        inner.set_stream(id);
        Self {
            seed,
            stream: id,
            inner,
        }
    }

    /// Same seed, different stream. Does not advance `self`.
    pub fn split(&self, stream: Stream) -> Self {
        Self::for_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std_dev * z
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Derives the seed of the `index`-th replicate from a base seed (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
