use std::time::Instant;

use mpt_core::gradcheck::{check_end_to_end, check_primitives};
use mpt_core::train::Method;

#[test]
fn primitives_match_finite_differences() {
    let t0 = Instant::now();
    let checks = check_primitives(20, 2024);
    for c in &checks {
        println!("{:<24} trials {:>2}  max rel err {:.2e}", c.name, c.trials, c.max_rel_err);
    }
    for c in &checks {
        assert!(c.trials >= 20);
        assert!(c.max_rel_err < 1e-4, "{}: {:e}", c.name, c.max_rel_err);
    }
    assert!(t0.elapsed().as_secs() < 60);
}

#[test]
fn prompt_gradient_matches_end_to_end() {
    for seed in 1..=3 {
        for method in [Method::Sp, Method::Mpt] {
            let err = check_end_to_end(method, seed);
            println!("{method} seed {seed}: rel err {err:.2e}");
            assert!(err < 1e-3, "{method} seed {seed}: {err:e}");
        }
    }
}
