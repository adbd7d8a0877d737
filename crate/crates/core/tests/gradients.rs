use wmr_core::gradcheck::{gradient_suite, DEFAULT_EPS};

#[test]
fn every_op_matches_finite_differences() {
    let rows = gradient_suite(7, DEFAULT_EPS).unwrap();
    for r in &rows {
        println!(
            "{:<32} {:>6} {:.3e}",
            r.name, r.elements, r.max_relative_error
        );
    }
    for r in &rows {
        assert!(
            r.max_relative_error < 1e-4,
            "{} failed: {:e}",
            r.name,
            r.max_relative_error
        );
    }
}
