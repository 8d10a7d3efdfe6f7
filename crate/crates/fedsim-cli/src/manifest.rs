//! Run manifests: everything needed to regenerate an output directory.

use serde::Serialize;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable hex hash of a spec's canonical JSON form.
pub fn config_hash<T: Serialize>(spec: &T) -> String {
    let canonical = serde_json::to_string(spec).expect("spec serializes");
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

pub fn version_tag() -> String {
    format!("fedsim {}", env!("CARGO_PKG_VERSION"))
}
