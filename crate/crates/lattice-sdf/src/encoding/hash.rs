//! Spatial hash for lattice vertex keys.

/// Per-coordinate multipliers; large odd constants picked for good avalanche
/// in hash-grid implementations. The first entry is 1 so one coordinate
/// passes through unmixed, which keeps nearby keys from colliding trivially.
pub const HASH_PRIMES: [u64; 6] = [
    1,
    2_654_435_761,
    805_459_861,
    3_674_653_429,
    2_097_192_037,
    1_434_869_437,
];

/// Hashes the first `d` coordinates of a lattice key into `[0, T)`.
///
/// Keys live in the elevated (d+1)-space with coordinate sum zero, so the
/// last coordinate is redundant and deliberately ignored; voxel corner keys
/// pass exactly `d` coordinates. `T` must be a power of two.
#[inline]
pub fn hash_vertex(key: &[i32], d: usize, table_size: usize) -> u32 {
    debug_assert!(table_size.is_power_of_two());
    let mut h: u64 = 0;
    for i in 0..d {
        h ^= (key[i] as i64 as u64).wrapping_mul(HASH_PRIMES[i]);
    }
    (h & (table_size as u64 - 1)) as u32
}
