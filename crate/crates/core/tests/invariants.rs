mod common;

use common::checks;
use proptest::prelude::*;

fn ok(r: checks::Outcome) -> Result<(), TestCaseError> {
    r.map(drop).map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn difference_maps_are_nonnegative_and_symmetric(seed in any::<u64>()) {
        ok(checks::diff_nonnegative_symmetric(seed))?;
    }

    #[test]
    fn filtration_takes_values_one_or_two(seed in any::<u64>()) {
        ok(checks::filtration_binary(seed))?;
    }

    #[test]
    fn raising_threshold_never_activates_more(seed in any::<u64>()) {
        ok(checks::threshold_monotone(seed))?;
    }

    #[test]
    fn attention_is_an_elementwise_product(seed in any::<u64>()) {
        ok(checks::attention_identity(seed))?;
    }

    #[test]
    fn highpass_and_lowpass_partition_the_image(seed in any::<u64>()) {
        ok(checks::band_complement(seed))?;
    }

    #[test]
    fn ap_never_increases_with_iou(seed in any::<u64>()) {
        ok(checks::ap_monotone_in_iou(seed))?;
    }

    #[test]
    fn zero_score_false_positive_is_neutral(seed in any::<u64>()) {
        ok(checks::zero_score_fp_neutral(seed))?;
    }

    #[test]
    fn adding_a_true_positive_never_lowers_ap(seed in any::<u64>()) {
        ok(checks::added_tp_never_hurts(seed))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_restores_the_image_size(h in 1usize..=64, w in 1usize..=64, p3 in any::<bool>()) {
        use srtod::nn::ParamStore;
        use srtod::recon::{ReconHead, SourceLevel};
        let level = if p3 { SourceLevel::P3 } else { SourceLevel::P2 };
        let (h, w) = if p3 { (h.div_ceil(2), w.div_ceil(2)) } else { (h, w) };
        let mut store = ParamStore::<f32>::new();
        let head = ReconHead::new(&mut store, 0, 8, level).unwrap();
        ok(checks::recon_shape(&store, &head, 8, h, w).map(|_| String::new()))?;
    }
}

#[test]
fn multiply_mode_obliterates_features_below_threshold() {
    checks::multiply_zeroes_features().unwrap();
}
