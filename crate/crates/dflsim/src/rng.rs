//! Deterministic seed derivation.
//!
//! Every random draw in a simulation comes from a stream keyed by the master
//! seed, a purpose tag, and integer coordinates (client id, round, ...). The
//! derivation is a fixed splitmix64 chain, so results never depend on call
//! order, thread scheduling, or process history.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a purpose tag and coordinates into one 64-bit seed.
pub fn derive_seed(master: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut state = master ^ 0x6c62_272e_07bb_0142;
    let mut out = splitmix64(&mut state);
    for byte in tag.as_bytes() {
        state ^= u64::from(*byte);
        out ^= splitmix64(&mut state);
    }
    for part in parts {
        state ^= *part;
        out ^= splitmix64(&mut state);
    }
    out
}

/// A ChaCha stream for the given purpose.
pub fn stream(master: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, parts))
}
