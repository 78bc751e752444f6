mod common;

use common::checks::{self, over_seeds};

const N: u64 = 60;

#[test]
fn pixel_diff_matches_loop() {
    over_seeds(N, checks::oracle_pixel_diff).unwrap();
}

#[test]
fn highfreq_diff_matches_direct_dft() {
    over_seeds(N, checks::oracle_highfreq_diff).unwrap();
}

#[test]
fn enhance_matches_hand_computation() {
    over_seeds(N, checks::oracle_enhance).unwrap();
}

#[test]
fn assign_targets_matches_exhaustive_loop() {
    over_seeds(N, checks::oracle_assign).unwrap();
}

#[test]
fn match_detections_matches_greedy_loop() {
    over_seeds(N, checks::oracle_match).unwrap();
}

#[test]
fn compute_ap_matches_pr_integration() {
    over_seeds(N, checks::oracle_ap).unwrap();
}
