//! Seed derivation for independent RNG streams.
//!
//! Everything stochastic in this crate runs on ChaCha8 generators seeded
//! through [`derive`], so any piece of work (a sample, a group score, an
//! augmented record) gets its own stream and stays reproducible no matter
//! what order the work runs in.

/// Mixes a salt into a base seed with the splitmix64 finalizer. Distinct
/// salts give statistically independent streams; the map is deterministic.
pub fn derive(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level derivation for (kind, index) streams.
pub fn derive2(base: u64, salt_a: u64, salt_b: u64) -> u64 {
    derive(derive(base, salt_a), salt_b)
}
