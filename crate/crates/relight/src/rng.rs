//! Seeded RNG used everywhere randomness is needed.
//!
//! A thin wrapper over ChaCha8 so that the stream is pinned by our own
//! seed derivation and does not drift with `StdRng` algorithm changes.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derive an independent stream, e.g. one per parameter or per sample.
    pub fn fork(&mut self, salt: u64) -> Self {
        let s = self.0.gen::<u64>() ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Rng::seed_from(s)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.0.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn flip(&mut self) -> bool {
        self.0.gen::<bool>()
    }

    pub fn fill_uniform(&mut self, buf: &mut [f32], lo: f32, hi: f32) {
        for v in buf.iter_mut() {
            *v = self.uniform(lo, hi);
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates; rand::seq::SliceRandom pulls the same algorithm,
        // spelled out here to keep the no_std-friendly feature set.
        for i in (1..items.len()).rev() {
            let j = self.0.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
