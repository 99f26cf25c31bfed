//! Seedable counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream identified by
//! `(seed, purpose, index)`. Streams are independent, so batch assembly for
//! step `k` never depends on how many numbers earlier steps consumed, and a
//! stream's exact position can be saved and restored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; occupies the top 16 bits of the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Dataset = 3,
    Eval = 4,
    Sample = 5,
    Rollout = 6,
    Verify = 7,
    Task = 8,
}

const INDEX_BITS: u32 = 48;

/// Stream `index` of `purpose` under master `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    assert!(index < (1 << INDEX_BITS), "stream index {index} too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}

/// Exact position of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &StreamRng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
