mod common;

use common::*;
use proptest::prelude::*;
use stiffkit::stiffness::{decode_snapshot, encode_snapshot};

fn check_snapshot(seed: u64) -> Result<(), TestCaseError> {
    check_against_oracle(&random_snapshot(seed, 60, 400)).map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analyzer_matches_double_loop_oracle(seed in any::<u64>()) {
        check_snapshot(seed)?;
    }

    #[test]
    fn snapshot_codec_roundtrip(seed in any::<u64>()) {
        let snap = random_snapshot(seed, 20, 50);
        let bytes = encode_snapshot(&snap);
        let back = decode_snapshot(&bytes).unwrap();
        prop_assert_eq!(&back, &snap);
        prop_assert_eq!(encode_snapshot(&back), bytes.clone());
        let cut = (seed as usize) % bytes.len();
        prop_assert!(decode_snapshot(&bytes[..cut]).is_err());
    }
}
