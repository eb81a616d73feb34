/// Derives an independent stream seed from a base seed and an index using
/// the SplitMix64 finaliser.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_indices_give_distinct_seeds() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| mix_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(mix_seed(7, 0), mix_seed(8, 0));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
