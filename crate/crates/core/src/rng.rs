//! Named, independent random streams derived from one experiment seed.
//!
//! Each component asks for its own generator by name (`"split"`, `"init"`,
//! `"noise"`, `"shuffle"`, ...) and optionally an index, so that changing how
//! many numbers one component draws never shifts another component's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Derive a child seed from a parent seed, a stream name and an index.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name)).wrapping_add(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, name: &str, index: u64) -> u64 {
        derive_seed(self.root, name, index)
    }

    pub fn rng(&self, name: &str, index: u64) -> StreamRng {
        StreamRng::seed_from_u64(self.seed(name, index))
    }

    pub fn child(&self, name: &str, index: u64) -> SeedTree {
        SeedTree::new(self.seed(name, index))
    }
}
