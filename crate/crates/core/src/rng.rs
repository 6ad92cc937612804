//! Seeded random sources.
//!
//! Every stochastic routine draws from ChaCha8 keyed by the user seed. Work
//! that fans out over independent paths selects the ChaCha stream by path
//! index, so a path's draws depend only on `(seed, path_index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Generator identity recorded in run manifests.
pub const GENERATOR: &str = "ChaCha8 (rand_chacha), ziggurat normals (rand_distr)";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for one path of a fan-out computation.
pub fn for_path(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
