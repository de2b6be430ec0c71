mod common;

use common::{grad_check, instance, max_relative_error, max_relative_error_with, LayerKind, GRAD_TOL};

#[test]
fn every_layer_type_matches_central_differences() {
    for kind in LayerKind::ALL {
        let s = grad_check(kind, 20, 1);
        assert!(s.worst < GRAD_TOL, "{}: worst relative error {:.3e}", kind.name(), s.worst);
    }
}

// At h = 1e-3 the difference quotient's own h^2 error exceeds 1e-4 relative on
// roughly 1% of random instances with tiny gradients, so the wide sweep uses a
// finer step.
#[test]
fn wide_sweep_with_fine_step() {
    for kind in LayerKind::ALL {
        let mut checked = 0;
        for seed in 5000..5300 {
            if let Some(e) = max_relative_error_with(&instance(kind, seed), 1e-5) {
                assert!(e < GRAD_TOL, "{} seed {seed}: {e:.3e}", kind.name());
                checked += 1;
            }
        }
        assert!(checked >= 150, "{}: only {checked} instances away from kinks", kind.name());
    }
}

#[test]
fn instances_are_reproducible() {
    let a = instance(LayerKind::Conv2d, 5);
    let b = instance(LayerKind::Conv2d, 5);
    assert_eq!(a.spec, b.spec);
    assert_eq!(a.params.values(), b.params.values());
    assert_eq!(max_relative_error(&a), max_relative_error(&b));
}
