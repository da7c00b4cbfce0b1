//! Seed derivation for independent deterministic random streams.

/// Mixes a base seed with a salt (worker index, step number, run tag) into
/// a fresh seed, splitmix64-style, so sub-streams never alias.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_salts_give_distinct_seeds() {
        let seeds: Vec<u64> = (0..100).map(|k| mix_seed(7, k)).collect();
        let mut dedup = seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), seeds.len());
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
