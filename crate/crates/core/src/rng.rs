//! Named, counter-addressed random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of `(root seed, purpose tag, counters...)`. A stream can therefore be
//! recreated from its coordinates alone, independent of thread scheduling or
//! of how many other streams were consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Site = 1,
    Split = 2,
    Init = 3,
    Shuffle = 4,
    Corrupt = 5,
    PromptNoise = 6,
    ChainNoise = 7,
    Bootstrap = 8,
    Baseline = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a root seed, a tag, and counters.
pub fn derive_seed(root: u64, stream: Stream, counters: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    h = splitmix64(h ^ (stream as u64));
    for &c in counters {
        h = splitmix64(h ^ c);
    }
    h
}

/// Returns the RNG for the given coordinates.
pub fn substream(root: u64, stream: Stream, counters: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stream, counters))
}
