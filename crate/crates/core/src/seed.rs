//! Stable hashing used for seed derivation and content addressing.

use sha2::{Digest, Sha256};

/// 64-bit hash of a sequence of integers (first 8 bytes of SHA-256, little-endian).
pub fn hash64(parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    first_u64(&hasher.finalize())
}

pub fn hash64_str(s: &str) -> u64 {
    first_u64(&Sha256::digest(s.as_bytes()))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn first_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
