mod common;

use std::time::Instant;

use hralign::tensor::{RngState, Tensor};

#[test]
fn every_op_matches_central_differences_on_twenty_seeds() {
    let start = Instant::now();
    let report = common::audit(20);
    let elapsed = start.elapsed().as_secs_f64();
    for (name, err) in &report {
        assert!(*err < common::FD_TOL, "{name}: relative error {err:e}");
    }
    assert!(report.len() >= 30);
    assert!(elapsed < 60.0, "audit took {elapsed:.1}s");
}

#[test]
fn repeated_backward_with_zeroed_grads_is_identical() {
    let mut rng = RngState::new(5);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng).into_param();
    let b = Tensor::randn(&[5, 3], 1.0, &mut rng).into_param();
    let loss = a.matmul(&b).unwrap().log_softmax().unwrap().sum();
    loss.backward().unwrap();
    let first = (a.grad().unwrap(), b.grad().unwrap());
    a.zero_grad();
    b.zero_grad();
    loss.backward().unwrap();
    assert_eq!(first, (a.grad().unwrap(), b.grad().unwrap()));
}

#[test]
fn matmul_gradient_of_sum_on_four_by_five() {
    let mut rng = RngState::new(11);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng).into_param();
    let b = Tensor::randn(&[5, 2], 1.0, &mut rng).into_param();
    let err = common::fd_rel_error(&[a.clone(), b.clone()], &|| Ok(a.matmul(&b)?.sum()));
    assert!(err < 1e-6, "{err:e}");
}
