//! Deterministic seed derivation.
//!
//! Every random stream of an experiment is keyed by a label so that adding
//! cells to a sweep never perturbs the seeds of existing cells.
use sha2::{Digest, Sha256};

/// Fold a value into a seed.
pub fn mix(seed: u64, value: u64) -> u64 {
    derive(seed, &[&value.to_le_bytes()])
}

/// First eight bytes of `SHA-256(master || part_0 || part_1 || ...)`, each
/// part length-prefixed.
pub fn derive(master: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed of one random stream of one sweep cell.
pub fn cell_seed(master: u64, control_kind: &str, zeta_index: usize, stream: &str) -> u64 {
    derive(
        master,
        &[
            control_kind.as_bytes(),
            &(zeta_index as u64).to_le_bytes(),
            stream.as_bytes(),
        ],
    )
}

/// Seed of a stream shared by every cell of a sweep.
pub fn shared_seed(master: u64, stream: &str) -> u64 {
    derive(master, &[b"shared", stream.as_bytes()])
}
