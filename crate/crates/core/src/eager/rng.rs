use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::HostData;

/// Standard-normal samples from a ChaCha stream keyed by `seed`. The stream
/// depends only on the seed, so lazy and eager runs see identical values.
pub fn randn_data(len: usize, seed: u64) -> HostData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HostData::F32((0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
}
