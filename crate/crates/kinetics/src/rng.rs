//! Seeded counter-based random streams.
//!
//! Every consumer derives its generator from `(seed, stream)` so results do
//! not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used to keep modules on disjoint streams.
pub mod tag {
    pub const GEOMETRY: u64 = 1 << 56;
    pub const KERNEL: u64 = 2 << 56;
    pub const EVOLVE: u64 = 3 << 56;
    pub const DYSON: u64 = 4 << 56;
    pub const INITIAL: u64 = 5 << 56;
    pub const DIAGRAMS: u64 = 6 << 56;
    pub const WIGNER: u64 = 7 << 56;
    pub const QUANTUM: u64 = 8 << 56;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
