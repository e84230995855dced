mod common;

use common::gradcheck::{cases, worst_error};

#[test]
fn single_precision_gradients_match_finite_differences() {
    for case in cases() {
        for seed in 0..20 {
            let err = worst_error::<f32>(&case, seed, 10);
            assert!(err <= 1e-4, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn double_precision_gradients_match_finite_differences() {
    for case in cases() {
        for seed in 0..20 {
            let err = worst_error::<f64>(&case, seed, 10);
            assert!(err <= 1e-7, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

