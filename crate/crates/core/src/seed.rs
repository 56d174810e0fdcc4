//! Sub-seed derivation from a single master seed.
//!
//! Every random stream in a run is keyed by `(master, role, counter)`, hashed
//! with SHA-256; the first eight bytes (little-endian) become the stream seed.
//! Streams are ChaCha8, so results do not depend on platform or thread layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, role: &str, counter: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((role.len() as u64).to_le_bytes());
    hasher.update(role.as_bytes());
    hasher.update(counter.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(master: u64, role: &str, counter: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, role, counter))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `ceil(x)` that ignores floating-point noise just above an integer,
/// so that `ceil(0.1 * 3 * 10)` is 3 and not 4.
pub(crate) fn ceil_count(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Nearest-integer count with the same noise guard.
pub(crate) fn round_count(x: f64) -> usize {
    (x + 1e-9).round().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn roles_and_counters_give_distinct_streams() {
        let a = derive_seed(7, "split", 0);
        assert_ne!(a, derive_seed(7, "split", 1));
        assert_ne!(a, derive_seed(7, "share", 0));
        assert_ne!(a, derive_seed(8, "split", 0));
        assert_eq!(a, derive_seed(7, "split", 0));
        let x: u64 = rng_for(1, "r", 2).gen();
        let y: u64 = rng_for(1, "r", 2).gen();
        assert_eq!(x, y);
    }

    #[test]
    fn ceil_count_ignores_rounding_noise() {
        assert_eq!(0.1 * 3.0 * 10.0, 3.0000000000000004);
        assert_eq!(ceil_count(0.1 * 3.0 * 10.0), 3);
        assert_eq!(ceil_count(2.1), 3);
        assert_eq!(ceil_count(0.0), 0);
        assert_eq!(round_count(0.7 * 10.0), 7);
        assert_eq!(round_count(2.5), 3);
    }
}
