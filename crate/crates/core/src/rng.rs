//! Seeded random streams.
//!
//! Every stochastic decision in the crate draws from a [`SeededRng`] whose
//! stream id is derived from the quantities that identify the draw (step,
//! image index, view index, level...). Identical `(seed, stream_id)` pairs
//! always replay the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    pub seed: u64,
    pub stream_id: u64,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream id derived from an ordered list of identifying parts.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let stream_id = parts
            .iter()
            .fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p.wrapping_add(1))));
        Self { seed, stream_id }
    }

    /// A child stream, e.g. `rng.child(view_index)`.
    pub fn child(&self, part: u64) -> Self {
        Self::derive(self.seed, &[self.stream_id, part])
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(self.stream_id);
        g
    }
}
