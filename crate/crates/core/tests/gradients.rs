mod common;

use common::criteria::*;
use omr_core::gradcheck::GradCheckConfig;

fn assert_all(f: fn(u64) -> omr_core::gradcheck::GradCheckReport, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let rep = f(seed);
        assert!(rep.passed(&GradCheckConfig::default()), "seed {seed}: {rep:?}");
    }
}

#[test]
fn convlstm_step_gradients() {
    assert_all(grad_convlstm, 0..4);
}

#[test]
fn focal_loss_gradients() {
    assert_all(grad_focal, 0..6);
}

#[test]
fn liou_loss_gradients() {
    assert_all(grad_liou, 0..6);
}

#[test]
fn omr_step_gradients() {
    assert_all(grad_omr_step, 0..4);
}

#[test]
fn conv_bn_deform_gradients_through_shared_harness() {
    assert_all(grad_conv2d, 0..3);
    assert_all(grad_batchnorm_relu, 0..3);
    assert_all(grad_deform_conv, 0..3);
}
