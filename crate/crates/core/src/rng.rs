//! Named, counter-based random streams.
//!
//! A stream is keyed by `(master_seed, name)`; each particle (or step) then
//! draws from its own ChaCha stream selected by index, so results never
//! depend on how work is split across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn new(master_seed: u64, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(master_seed.to_le_bytes());
        h.update(name.as_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.0);
        rng.set_stream(index);
        rng
    }
}
