//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream keyed on
//! `(seed, chain, iteration, role)`. A key is hashed into a ChaCha8 seed, so
//! the draws for iteration `k` of chain `c` never depend on how many numbers
//! other chains or other iterations consumed, or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct roles never share numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamRole {
    /// Stratified midpoints `U_r`.
    Midpoints = 1,
    /// Brownian increments for one outer iteration.
    Brownian = 2,
    /// Initial position / velocity draws.
    Initial = 3,
    /// Bootstrap resampling in the metrics module.
    Bootstrap = 4,
    /// Free-form streams used by diagnostics.
    Diagnostic = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub chain: u64,
    pub iteration: u64,
    pub role: StreamRole,
}

impl StreamKey {
    pub fn new(seed: u64, chain: u64, iteration: u64, role: StreamRole) -> Self {
        Self {
            seed,
            chain,
            iteration,
            role,
        }
    }

    /// Builds the generator for this key.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908);
        let mut bytes = [0u8; 32];
        let words = [self.chain, self.iteration, self.role as u64, 0x5851_f42d_4c95_7f2d];
        for (slot, word) in bytes.chunks_exact_mut(8).zip(words) {
            state = splitmix64(state ^ splitmix64(word));
            slot.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
