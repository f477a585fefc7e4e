mod common;

use common::{network_gradient_error, op_gradient_errors, FD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20 {
        for (op, err) in op_gradient_errors(seed) {
            assert!(err < FD_TOL, "seed {seed}, {op}: relative error {err:e}");
        }
    }
}

#[test]
fn tiny_network_matches_finite_differences() {
    for seed in 0..20 {
        let err = network_gradient_error(seed);
        assert!(err < FD_TOL, "seed {seed}: relative error {err:e}");
    }
}
