//! Seedable, splittable random keys.
//!
//! A [`RngKey`] never produces numbers itself. It is split or folded into
//! child keys, and only a leaf key is turned into a generator with
//! [`RngKey::rng`]. Ensemble member `i` always receives `key.fold_in(i)`, so
//! results do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey([u64; 2]);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey([splitmix(seed), splitmix(seed ^ 0x6a09_e667_f3bc_c909)])
    }

    /// Derives an independent child key from `data`.
    pub fn fold_in(self, data: u64) -> Self {
        let a = splitmix(self.0[0] ^ splitmix(data.wrapping_add(0x9e37_79b9)));
        let b = splitmix(self.0[1].rotate_left(17) ^ a ^ data);
        RngKey([a, b])
    }

    pub fn split(self, n: usize) -> Vec<RngKey> {
        (0..n as u64).map(|i| self.fold_in(i)).collect()
    }

    /// A ChaCha8 stream generator seeded from this key.
    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let words = [
            self.0[0],
            self.0[1],
            splitmix(self.0[0] ^ 0xbb67_ae85_84ca_a73b),
            splitmix(self.0[1] ^ 0x3c6e_f372_fe94_f82b),
        ];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
