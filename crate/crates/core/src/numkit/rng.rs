//! Seeded random streams.
//!
//! Every stage draws from a ChaCha8 generator keyed by the master seed, with
//! the 64-bit ChaCha stream id selected by [`stream_id`]. Streams for
//! different `(stage, index)` pairs never overlap, so each stage (and each
//! episode or seed cell within a stage) can be replayed on its own.
//!
//! Stream id mixing: `splitmix64(fnv1a64(stage_name) ^ splitmix64(index))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Env,
    Datagen,
    Vae,
    Augment,
    Agent,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Env => "env",
            Stage::Datagen => "datagen",
            Stage::Vae => "vae",
            Stage::Augment => "augment",
            Stage::Agent => "agent",
            Stage::Eval => "eval",
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn stream_id(stage: Stage, index: u64) -> u64 {
    splitmix64(fnv1a64(stage.name().as_bytes()) ^ splitmix64(index))
}

/// Root of all randomness for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, stage: Stage, index: u64) -> Rng {
        let mut rng = Rng::seed_from_u64(self.master);
        rng.set_stream(stream_id(stage, index));
        rng
    }

    /// Derives a 64-bit seed (e.g. for a nested tree or a stored provenance seed).
    pub fn derive(&self, stage: Stage, index: u64) -> u64 {
        splitmix64(self.master ^ stream_id(stage, index))
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
