//! Deterministic seed derivation.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `parts` under `base`. Distinct paths give unrelated
/// streams, the same path always gives the same seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut h = mix(base.wrapping_add(GOLDEN));
    for (i, p) in parts.iter().enumerate() {
        h = mix(h ^ p.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2)));
    }
    h
}
