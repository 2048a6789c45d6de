//! Counter-based seed derivation.
//!
//! Every random stream is keyed by `(master seed, purpose, round, client)`,
//! so drawing from one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Backbone = 1,
    Prompts = 2,
    Data = 3,
    Partition = 4,
    Heldout = 5,
    Sampling = 6,
    Warmup = 7,
    Batches = 8,
    Privacy = 9,
    Domains = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, round: u64, client: u64) -> u64 {
    let mut h = splitmix64(master);
    for word in [purpose as u64, round, client] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, round, client))
}
