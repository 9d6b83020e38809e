//! Central finite-difference checks of every differentiable operation and of
//! the generator-to-loss path, over ten seeds each.

mod support;

use metaprune::stream_rng;
use metaprune::tensorcore::Tensor;
use support::gradcases::CASES;
use support::{grad_check, random_tensor, run_grad_case, FD_TOLERANCE};

fn check(name: &str) {
    let case = CASES.iter().find(|c| c.0 == name).unwrap_or_else(|| panic!("no case `{name}`"));
    let (worst, seed) = run_grad_case(case);
    assert!(worst < FD_TOLERANCE, "{name}: relative error {worst:e} at seed {seed}");
}

#[test]
fn every_case_has_a_test() {
    assert_eq!(CASES.len(), 17);
}

#[test]
fn dense() {
    check("dense");
    check("pooled dense without bias");
}

#[test]
fn conv2d() {
    for name in ["conv2d 3x3 stride 1", "conv2d 3x3 stride 2", "conv2d 1x1", "conv2d 2x2 stride 2 unpadded"] {
        check(name);
    }
}

#[test]
fn depthwise_conv2d() {
    for name in ["depthwise stride 1", "depthwise stride 2", "depthwise stride 2 unpadded"] {
        check(name);
    }
}

#[test]
fn channel_norm() {
    check("channel norm, batch statistics");
    check("channel norm, fixed statistics");
}

#[test]
fn elementwise() {
    check("relu");
    check("add, add_scalar");
}

#[test]
fn pooling_and_loss() {
    check("global average pool");
    check("softmax cross-entropy");
}

#[test]
fn crop() {
    check("crop");
}

#[test]
fn hypernet_to_loss() {
    check("hypernet -> crop -> forward -> loss");
}

#[test]
fn oracle_flags_a_wrong_gradient() {
    let mut rng = stream_rng(0, 0);
    let x = random_tensor(&[3], 0.0, &mut rng);
    let ok = grad_check(&[x.clone()], None, |t, v| {
        let c = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        t.dot(v[0], &c).unwrap()
    });
    assert!(ok.passes());
    // sum(x * x) with the second factor frozen as a constant: the tape sees
    // half the true derivative
    let bad = grad_check(&[x], None, |t, v| {
        let frozen = t.value(v[0]).clone();
        t.dot(v[0], &frozen).unwrap()
    });
    assert!(!bad.passes(), "{:?}", bad.rel_errors);
}
