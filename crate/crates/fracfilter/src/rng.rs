//! Deterministic random-number substreams.
//!
//! Every stochastic component draws from its own named substream derived from
//! the master seed, so adding or reordering draws in one component never
//! shifts the numbers seen by another. Seeds are derived with a hand-rolled
//! FNV-1a / splitmix64 combination because the standard library hasher is not
//! guaranteed to be stable across releases, and reproducibility of runs is a
//! hard requirement here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Derives a child seed from the master seed, a component label, and numeric
/// indices (ensemble member, assimilation step, inner iteration, ...).
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    let absorb = |h: &mut u64, byte: u8| {
        *h ^= byte as u64;
        *h = h.wrapping_mul(FNV_PRIME);
    };
    for b in master.to_le_bytes() {
        absorb(&mut h, b);
    }
    for &b in label.as_bytes() {
        absorb(&mut h, b);
    }
    for &ix in indices {
        // Separator byte keeps index tuples prefix-free.
        absorb(&mut h, 0xff);
        for b in ix.to_le_bytes() {
            absorb(&mut h, b);
        }
    }
    splitmix64(h)
}

/// splitmix64 finalizer; spreads FNV output over the full 64-bit range.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the generator for a named substream of the master seed.
pub fn substream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, indices))
}
