mod common;

use bbs_core::denoiser::DenoiserConfig;
use common::{max_rel_error, tiny};

#[test]
fn gradients_match_finite_differences_with_attention() {
    let (err, at) = max_rel_error(&tiny(2), 11);
    assert!(err <= 1e-3, "max relative error {err:e} at {at}");
}

#[test]
fn gradients_match_finite_differences_without_attention() {
    let (err, at) = max_rel_error(&tiny(0), 12);
    assert!(err <= 1e-3, "max relative error {err:e} at {at}");
}

#[test]
fn three_level_gradients_match() {
    let cfg = DenoiserConfig {
        level_channels: vec![4, 6, 8],
        attention_levels: 1,
        ..tiny(0)
    };
    let (err, at) = max_rel_error(&cfg, 13);
    assert!(err <= 1e-3, "max relative error {err:e} at {at}");
}
