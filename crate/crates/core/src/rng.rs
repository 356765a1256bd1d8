//! Seeded random streams. Every consumer of randomness in a run draws from
//! its own ChaCha stream derived from the run seed, so changing how much one
//! component draws never shifts another.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type RunRng = ChaCha8Rng;

/// Named sub-streams of a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    EncoderInit = 2,
    ClassifierInit = 3,
    IdmInit = 4,
    SourceSampling = 5,
    TargetSampling = 6,
    Pairing = 7,
    Mixup = 8,
    Jitter = 9,
    ClassifierResize = 10,
}

pub fn stream(seed: u64, which: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}
