use vapf::config::{ExperimentConfig, VerifyConfig};
use vapf::verify;

#[test]
fn backward_matches_finite_differences() {
    let o = verify::check_gradients(&VerifyConfig::default()).unwrap();
    println!("{}", o.detail);
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn encoders_match_plain_loop_references() {
    let o = verify::check_reference_models().unwrap();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn global_transform_reduces_exactly() {
    let o = verify::check_global_reduction().unwrap();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn prompt_tuning_leaves_frozen_bytes_alone() {
    let cfg = ExperimentConfig::default();
    let clean = verify::check_freeze(&cfg, false).unwrap();
    assert!(clean.passed, "{}", clean.detail);
    let corrupted = verify::check_freeze(&cfg, true).unwrap();
    assert!(!corrupted.passed, "{}", corrupted.detail);
    assert!(corrupted.detail.contains("frozen tensors changed"));
}
