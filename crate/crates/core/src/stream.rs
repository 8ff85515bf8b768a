//! Hierarchically keyed random streams.
//!
//! Every random draw in the simulation is addressed by a key path
//! (run seed → task id → iteration → candidate seed → purpose) instead of a
//! shared mutable generator, so draws do not depend on execution order and
//! concurrent candidates stay reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(u64);

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(mix(seed))
    }

    pub fn child(self, n: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(n.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn child_str(self, s: &str) -> Self {
        self.child(fnv1a(s.as_bytes()))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// One uniform draw in `[0, 1)`.
    pub fn unit(self) -> f64 {
        self.rng().random::<f64>()
    }
}
