//! Deterministic derivation of independent RNG streams from one experiment seed.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with a path of stream labels into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub const STREAM_DATA: u64 = 0xDA7A;
pub const STREAM_MODEL_F1: u64 = 0xF1;
pub const STREAM_MODEL_F2: u64 = 0xF2;
pub const STREAM_SHUFFLE: u64 = 0x5F1E;
