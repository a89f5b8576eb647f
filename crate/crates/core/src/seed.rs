//! Derivation of independent seeds from one root seed, so each consumer
//! (data split, init, shuffling, dropout, bootstrap) can be reproduced alone.

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named consumer of `root`, optionally further indexed.
pub fn derive(root: u64, label: &str, index: &[u64]) -> u64 {
    let mut h = mix(root);
    for b in label.bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &i in index {
        h = mix(h ^ i);
    }
    h
}
