//! Deterministic random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(root seed, tag)` and selected by an index:
//!
//! * the 256-bit key is the SplitMix64 expansion of `mix(root, fnv1a(tag))`,
//! * the ChaCha stream id is the index.
//!
//! Streams with distinct `(root, tag, index)` are independent, so work can be
//! split across threads by index and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit child seed from a root seed, a tag and an index.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut state = root ^ fnv1a(tag).rotate_left(17);
    let a = splitmix64(&mut state);
    let mut state = a ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    splitmix64(&mut state)
}

fn key(root: u64, tag: &str) -> [u8; 32] {
    let mut state = root ^ fnv1a(tag);
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// The random stream for `(root, tag, index)`.
pub fn stream(root: u64, tag: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::from_seed(key(root, tag));
    rng.set_stream(index);
    rng
}
