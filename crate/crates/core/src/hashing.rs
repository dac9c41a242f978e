//! Content digests used for prompt hashes, cache keys and seed derivation.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the canonical JSON form of `value`. Object keys are sorted, so
/// the digest does not depend on field declaration or input order.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    // `serde_json::Value` objects are BTreeMaps; round-tripping sorts keys.
    let value = serde_json::to_value(value).expect("value serializes to JSON");
    sha256_hex(serde_json::to_vec(&value).expect("JSON value serializes"))
}

/// Derives a 64-bit seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
