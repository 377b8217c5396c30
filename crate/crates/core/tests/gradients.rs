use std::time::Instant;
use vist_core::autograd::grad_check;
use vist_core::gradcheck::{run_suite, OP_TOL};
use vist_core::Tensor;

#[test]
fn every_op_and_the_model_match_finite_differences() {
    let t0 = Instant::now();
    let cases = run_suite(0).unwrap();
    let failing: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {}", c.name, c.report))
        .collect();
    assert!(failing.is_empty(), "{failing:#?}");
    assert!(cases.iter().any(|c| c.name == "full_model"));
    assert!(t0.elapsed().as_secs() < 60, "suite took {:?}", t0.elapsed());
}

#[test]
fn suite_catches_a_wrong_derivative() {
    // x * x recorded with derivative x instead of 2x
    let x = Tensor::new([3], vec![0.3, -0.7, 0.9]).unwrap();
    let r = grad_check(
        |g, v| {
            let val = v.value();
            let s = val.data().iter().map(|a| a * a).sum();
            g.fused_scalar("half_square_grad", s, vec![(v, (*val).clone())])
        },
        &x,
        1e-4,
        OP_TOL,
    )
    .unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures.len(), 3);
}
