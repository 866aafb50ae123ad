//! Retrieval metrics, batch-hard triplet mining and SSIM against brute-force
//! reference implementations on randomized inputs.

mod common;

use common::equivalence;

#[test]
fn cmc_and_map_match_exhaustive_oracle() {
    equivalence::retrieval(300, 2024).unwrap();
}

#[test]
fn batch_hard_triplet_matches_all_combinations() {
    equivalence::triplet(150, 77).unwrap();
}

#[test]
fn ssim_matches_direct_windowed_oracle() {
    equivalence::structural_similarity(20, 5).unwrap();
    let x: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let s = crossres::evaluator::ssim(&x, &x, 16, 16).unwrap();
    assert!((s - 1.0).abs() < 1e-12);
}
