//! Keyed deterministic random streams.
//!
//! Every stochastic draw in the crate comes from an [`RngStream`] built from
//! an experiment seed and a [`StreamKey`]. The key is derived from the purpose
//! of the draw plus the indices that identify it (element id, round, pass,
//! epoch ...), never from thread identity, so results do not depend on how
//! work is scheduled.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Scalar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Each purpose starts a disjoint key family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Init,
    Dropout,
    Acquisition,
    Shuffle,
    MaskedLm,
    Synth,
    Train,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1001,
            Purpose::Dropout => 0x2002,
            Purpose::Acquisition => 0x3003,
            Purpose::Shuffle => 0x4004,
            Purpose::MaskedLm => 0x5005,
            Purpose::Synth => 0x6006,
            Purpose::Train => 0x7007,
        }
    }
}

/// 64-bit stream selector built by folding indices into a purpose tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(purpose: Purpose) -> Self {
        StreamKey(splitmix64(purpose.tag()))
    }

    /// Derives a child key. `k.with(a).with(b)` differs from `k.with(b).with(a)`.
    #[must_use]
    pub fn with(self, index: u64) -> Self {
        StreamKey(splitmix64(
            self.0 ^ splitmix64(index.wrapping_add(GOLDEN_GAMMA)),
        ))
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

/// A ChaCha8 stream fully determined by `(seed, key)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: StreamKey,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(key.value());
        RngStream { seed, key, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Independent stream for a sub-task; the parent stream is not advanced.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, self.key.with(index))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform<T: Scalar>(&mut self) -> T {
        T::lit(self.rng.random::<f64>())
    }

    pub fn normal<T: Scalar>(&mut self, std: f64) -> T {
        let z: f64 = self.rng.sample(StandardNormal);
        T::lit(z * std)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.rng);
    }
}
