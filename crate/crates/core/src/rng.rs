//! Deterministic RNG streams derived from a master seed.
//!
//! Every stochastic component draws from a ChaCha stream keyed by the master
//! seed plus a list of stream labels (client id, round index, purpose tag),
//! so results are independent of execution order and thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer, used to mix stream labels into a 64-bit state.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from `master` and the given labels.
pub fn derive(master: u64, labels: &[u64]) -> ChaCha12Rng {
    let mut state = mix(master);
    for &l in labels {
        state = mix(state ^ mix(l));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}
