//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, domain, index)`. The seed and domain are
//! mixed into a ChaCha key and the index selects the ChaCha stream, so any
//! episode can be regenerated independently of how work was scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Domain tags keep streams used for different purposes disjoint.
pub mod domain {
    pub const TASK: u64 = 0x7461_736b;
    pub const PRETRAIN: u64 = 0x7072_6574;
    pub const EVAL: u64 = 0x6576_616c;
    pub const MOMENT: u64 = 0x6d6f_6d65;
    pub const OPCHECK: u64 = 0x6f70_6368;
    pub const MISC: u64 = 0x6d69_7363;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Single-owner random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    /// Stream for `(seed, domain, index)`.
    pub fn derive(seed: u64, domain: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed ^ splitmix64(domain));
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        Self { rng }
    }

    /// Shorthand for the generic domain with index 0.
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, domain::MISC, 0)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
