//! Seed streams.
//!
//! Every stochastic choice draws from a ChaCha8 generator keyed by a path of
//! integers (seed, purpose, epoch, item, view, ...). The key is derived by
//! hashing the path, so results depend only on the path and never on the
//! order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A position in the tree of random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            key: splitmix64(seed),
        }
    }

    /// Child stream for a sub-purpose or index.
    pub fn derive(self, part: u64) -> Self {
        SeedStream {
            key: splitmix64(self.key ^ splitmix64(part.wrapping_add(0xA076_1D64_78BD_642F))),
        }
    }

    /// Child stream named by a string tag.
    pub fn tagged(self, tag: &str) -> Self {
        let h = tag
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.derive(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
