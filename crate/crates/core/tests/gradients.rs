mod common;

use std::time::Instant;

#[test]
fn every_op_matches_finite_differences() {
    let start = Instant::now();
    let results = common::gradient_suite(100);
    for (name, worst) in &results {
        assert!(*worst <= common::GRAD_TOL, "{name}: worst relative error {worst:e}");
    }
    assert!(results.len() >= 20);
    eprintln!("gradient suite took {:?}", start.elapsed());
}
