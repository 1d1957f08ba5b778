//! Labeled seed derivation.

use sha2::{Digest, Sha256};

/// Independent, reproducible child seed for `label` under `root`.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
