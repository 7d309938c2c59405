//! Seeded random streams. Every random quantity in a run derives from a
//! 64-bit seed plus a stream index, so results depend only on configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type RunRng = ChaCha8Rng;

/// Stream reserved for parameter initialization.
pub const INIT_STREAM: u64 = u64::MAX;

pub fn stream_rng(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
