//! Named, counter-based random substreams.
//!
//! Every consumer of randomness derives its generator from the root seed, a
//! phase name and an index, so streams do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATAGEN: &str = "datagen";
pub const VARIANTS: &str = "variants";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const SPLIT: &str = "split";
pub const EVAL: &str = "eval";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_id(name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then mixed with the index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix(h ^ splitmix(index))
}

/// Generator for `(root, name, index)`.
pub fn substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream_id(name, index));
    rng
}

/// Derived 64-bit seed, for handing a sub-phase its own root.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix(root ^ stream_id(name, index))
}
