// Full-network sampled-parameter gradient checks (training precision).
use uattn_core::gradcheck::{full_network_check, FULL_NETWORK_TOL};

// Quick stratified sample; the acceptance suite runs the budgeted version
// and `one_percent_invariant` below covers the full stated sample rate.
#[test]
fn full_network_small_sample() {
    let worst = full_network_check(0.0005);
    assert!(worst < FULL_NETWORK_TOL, "worst rel err {worst}");
}

// The heavyweight 1% invariant (~10 min on two cores). Run explicitly:
// `cargo test -p uattn-core --release --test full_gradcheck -- --ignored`
#[test]
#[ignore]
fn one_percent_invariant() {
    let worst = full_network_check(0.01);
    assert!(worst < FULL_NETWORK_TOL, "worst rel err {worst}");
}
