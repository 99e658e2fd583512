/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent job seed from a base seed and a list of ids.
pub fn derive_seed(base: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix(base), |acc, &id| mix(acc ^ mix(id)))
}
