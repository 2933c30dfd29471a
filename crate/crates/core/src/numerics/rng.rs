//! Named, independent, counter-based random streams.
//!
//! Every draw site asks for a generator keyed by `(stream, key...)`, e.g. the
//! Langevin noise of record 17 in batch 3 of epoch 2. The generator is a ChaCha20
//! instance whose 64-bit stream id is a hash of the key, so results do not depend
//! on thread scheduling or on the order in which sites are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    Langevin,
    Sampling,
    Shuffle,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Init, Stream::Langevin, Stream::Sampling, Stream::Shuffle];

    fn index(self) -> usize {
        match self {
            Stream::Init => 0,
            Stream::Langevin => 1,
            Stream::Sampling => 2,
            Stream::Shuffle => 3,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-stream seeds derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    seeds: [u64; 4],
}

pub type StreamRng = ChaCha20Rng;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let mut seeds = [0; 4];
        for (i, s) in seeds.iter_mut().enumerate() {
            *s = splitmix64(seed ^ splitmix64(i as u64 + 1));
        }
        RngStreams { seeds }
    }

    /// Replaces the seed of one stream, leaving the others untouched.
    pub fn with_stream_seed(mut self, stream: Stream, seed: u64) -> Self {
        self.seeds[stream.index()] = seed;
        self
    }

    pub fn seed_of(&self, stream: Stream) -> u64 {
        self.seeds[stream.index()]
    }

    pub fn rng(&self, stream: Stream, key: &[u64]) -> StreamRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seeds[stream.index()]);
        let mut h = splitmix64(key.len() as u64);
        for &k in key {
            h = splitmix64(h ^ k);
        }
        rng.set_stream(h);
        rng
    }
}

pub fn standard_normals(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Normal draws with the given standard deviation, resampled outside ±2σ.
pub fn truncated_normals(rng: &mut StreamRng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
        .collect()
}
