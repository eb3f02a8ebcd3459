//! Deterministic weight materialization.
//!
//! Conv weights that are not given inline are generated from the model's
//! `weight_seed` with a fixed, platform-independent generator so that filter
//! rankings reproduce everywhere:
//!
//! * per-node stream seed: `weight_seed XOR fnv1a64(node id)`
//! * stream: splitmix64 (increment `0x9E3779B97F4A7C15`)
//! * mapping: the top 53 bits of each output scaled into `[-1, 1)`
//!
//! All constants below are part of the file-format contract.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;
const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Materialize `len` weights in `[-1, 1)` for the node named `id`.
pub fn materialize_weights(weight_seed: u64, id: &str, len: usize) -> Vec<f64> {
    let mut state = weight_seed ^ fnv1a64(id.as_bytes());
    (0..len)
        .map(|_| {
            let bits = splitmix64(&mut state) >> 11;
            bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}
