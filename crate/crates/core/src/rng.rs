//! Seeded random streams. Every consumer takes an explicit generator; runs
//! that need several independent sequences derive them from one seed by
//! selecting different ChaCha streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Stream ids used by the imputer so that data initialisation, network
/// initialisation and batch sampling never share a sequence.
pub mod streams {
    pub const INIT_VALUES: u64 = 1;
    pub const INIT_NETWORK: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const CHECKS: u64 = 6;
}

pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
