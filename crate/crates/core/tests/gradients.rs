//! Analytic gradients against central finite differences.

mod common;

use common::gradcheck::*;

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..8 {
        let e = mlp_case(seed);
        assert!(e < TOL, "mlp case {seed}: relative error {e:e}");
    }
}

#[test]
fn denoising_loss_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let e = denoiser_case(seed);
        assert!(e < TOL, "denoiser case {seed}: relative error {e:e}");
    }
}

#[test]
fn projector_gradients_match_finite_differences() {
    for seed in 0..8 {
        let e = projector_case(seed);
        assert!(e < TOL, "projector case {seed}: relative error {e:e}");
    }
}

#[test]
fn tuning_loss_gradient_reaches_the_projector() {
    for seed in 0..4 {
        let e = tune_case(seed);
        assert!(e < TOL, "tuning case {seed}: relative error {e:e}");
    }
}

/// Whole suite in one place, for the runtime budget.
#[test]
fn suite_covers_twenty_configurations_quickly() {
    let (n, worst, secs) = run_suite();
    eprintln!("{n} configurations, worst relative error {worst:e}, {secs:.2}s");
    assert!(n >= 20);
    assert!(worst < TOL, "worst relative error {worst:e}");
    assert!(secs < 30.0, "took {secs:.1}s");
}
