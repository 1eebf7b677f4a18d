//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! run seed, so changing how often one stream is drawn from (for example the
//! training ratio) never shifts the numbers another stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. The numeric values are part of the reproducibility
/// contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    GeneratorInit = 1,
    DiscriminatorInit = 2,
    DataBatches = 3,
    TrainingLatents = 4,
    EvaluationLatents = 5,
    Generation = 6,
    Synthetic = 7,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix(base), |acc, &p| mix(acc ^ mix(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
