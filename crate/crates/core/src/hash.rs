//! Stable, platform-independent hashing for seeds and synthetic attention.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Order-sensitive combination of 64-bit words.
pub fn combine(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(FNV_OFFSET, |h, &p| mix64(h ^ p.wrapping_mul(FNV_PRIME)))
}

/// Per-document seed derived from the global seed and the document id.
pub fn doc_seed(global_seed: u64, doc_id: &str) -> u64 {
    combine(&[global_seed, hash_str(doc_id)])
}

/// Maps a hash to a uniform value in `[-1, 1)`.
pub fn unit_signed(h: u64) -> f64 {
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}
