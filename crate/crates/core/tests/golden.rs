//! The committed synthetic dataset is pinned to its generator: regenerating
//! it from the recorded truth and seed must reproduce the files byte for
//! byte, so any change to the count synthesis or the transition math that
//! would silently move the data shows up here.

mod common;

use common::*;
use threestate::simulate::synthesize_counts;

#[test]
fn golden_counts_regenerate_byte_identically() {
    let counts = synthesize_counts(&golden_truth(), &golden_denominators(), GOLDEN_SEED).unwrap();
    assert_eq!(
        counts_to_csv(&counts),
        include_str!("data/golden_counts.csv"),
        "regenerated counts differ from the committed file"
    );
}

#[test]
fn golden_truth_regenerates_byte_identically() {
    assert_eq!(
        truth_to_csv(&golden_truth()),
        include_str!("data/golden_truth.csv"),
        "regenerated truth differs from the committed file"
    );
}

#[test]
fn golden_dataset_loads_cleanly() {
    let data = golden_dataset();
    assert_eq!(data.n_ages(), GOLDEN_AGES);
    assert_eq!(data.n_populations(), 1);
    let (inc, cf) = golden_truth_curves();
    assert_eq!(inc.len(), GOLDEN_AGES);
    assert_eq!(cf.len(), GOLDEN_AGES);
    // Spot checks against the closed forms behind the committed truth.
    assert!((inc[0] - 0.015 * (-0.4f64).exp()).abs() < 1e-15);
    assert!((cf[99] - 0.08 * (0.9f64).exp()).abs() < 1e-15);
}

/// Regenerates the committed files in place. Run explicitly when the truth
/// or the synthesis intentionally changes:
/// `cargo test -p threestate --test golden -- --ignored write_golden_files`
#[test]
#[ignore]
fn write_golden_files() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
    std::fs::create_dir_all(dir).unwrap();
    let counts = synthesize_counts(&golden_truth(), &golden_denominators(), GOLDEN_SEED).unwrap();
    std::fs::write(format!("{dir}/golden_counts.csv"), counts_to_csv(&counts)).unwrap();
    std::fs::write(format!("{dir}/golden_truth.csv"), truth_to_csv(&golden_truth())).unwrap();
}
