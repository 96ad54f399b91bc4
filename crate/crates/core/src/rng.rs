//! Deterministic random streams derived from a single run seed.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, purpose, round, index)`, so results do not depend on the order in
//! which parallel workers finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Capacity = 3,
    Init = 4,
    Select = 5,
    Client = 6,
    Transform = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, purpose: Stream, round: u64, index: u64) -> SimRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ round);
    h = splitmix64(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}
