//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by a `(base, tags...)` tuple so
//! that adding a new consumer never reshuffles the randomness of existing ones.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(base), |acc, &t| mix64(acc ^ mix64(t)))
}

/// FNV-1a over a string, used to key seeds by identifiers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
