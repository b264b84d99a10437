//! Seed derivation.
//!
//! Every random stream in the crate is seeded from a master seed and a stream
//! identifier through [`derive_seed`]:
//!
//! ```text
//! derive_seed(master, stream) = splitmix64(splitmix64(master) ^ stream)
//! splitmix64(x): z = x + 0x9E3779B97F4A7C15
//!                z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!                z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                return z ^ (z >> 31)          (all arithmetic wrapping, mod 2^64)
//! ```
//!
//! Image `i` of a dataset uses stream `i`; training namespaces use the
//! constants in [`stream`] combined with the episode index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream namespaces for training randomness.
pub mod stream {
    pub const INIT: u64 = 0x494E_4954_0000_0000;
    pub const SHUFFLE: u64 = 0x5348_5546_0000_0000;
    pub const AUGMENT: u64 = 0x4155_474D_0000_0000;
    pub const SPLIT: u64 = 0x5350_4C54_0000_0000;
    pub const APPEARANCE: u64 = 0x4150_5052_0000_0000;
}
