mod common;

use common::*;

const CASES: u32 = 256;

#[test]
fn theta_and_lambda_round_trip() {
    common::theta_lambda_round_trip(CASES).unwrap();
}

#[test]
fn covariance_is_psd() {
    covariance_psd(CASES).unwrap();
}

#[test]
fn theta_is_equivariant_under_response_scaling() {
    response_scale_equivariance(CASES).unwrap();
}

#[test]
fn interior_optimum_is_stationary() {
    interior_stationarity(CASES).unwrap();
}

#[test]
fn ml_deviance_decreases_along_nested_chain() {
    nesting_monotonicity(CASES).unwrap();
}

#[test]
fn formula_text_round_trips() {
    formula_round_trip(CASES).unwrap();
}
