//! Structural identities and attention locality.

mod common;

#[test]
fn zero_init_conv_blocks_are_identity() {
    common::zero_init_identity().unwrap();
}

#[test]
fn windowed_attention_matches_global_when_window_covers_grid() {
    let d = common::windowed_equals_global().unwrap();
    assert!(d < 1e-10, "max abs diff {d:e}");
}

#[test]
fn partition_round_trip_with_padding() {
    common::partition_round_trip().unwrap();
}

#[test]
fn evenly_spaced_indices_for_24_blocks() {
    common::propagation_indices_evenly().unwrap();
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    common::checkpoint_round_trip().unwrap();
}

#[test]
fn propagation_controls_cross_window_influence() {
    let l = common::locality().unwrap();
    assert_eq!(l.none_cross, 0.0, "windowed-only backbone leaked across windows");
    assert!(l.global_min > 0.0, "global blocks left a window untouched");
    assert_eq!(l.first_k_cross, 0.0, "blocks after the first four global ones leaked");
    assert!(l.first_k_from_start_min > 0.0);
}
