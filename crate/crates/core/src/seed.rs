//! Seed derivation helpers.
//!
//! Every randomized component takes its own RNG seeded through
//! [`derive`], so independent components (layout, content, runtime
//! traffic, per-cell campaign runs) draw from decoupled streams and a
//! change in how one component consumes randomness cannot shift another.

/// One round of splitmix64; the standard 64-bit finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of labels.
///
/// The derivation is order-sensitive: `derive(s, &[1, 2])` and
/// `derive(s, &[2, 1])` are unrelated.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &label in path {
        state = splitmix64(state ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    state
}

/// Fills `buf` with a deterministic byte pattern for stream `tag`.
///
/// Used to give every physical frame distinct, reproducible initial
/// content so that extraction comparisons catch off-by-one-frame and
/// offset errors that an all-zeros fill would hide.
pub fn fill_pattern(tag: u64, buf: &mut [u8]) {
    let mut state = splitmix64(tag);
    for chunk in buf.chunks_mut(8) {
        state = splitmix64(state);
        let bytes = state.to_le_bytes();
        chunk.copy_from_slice(&bytes[..chunk.len()]);
    }
}
