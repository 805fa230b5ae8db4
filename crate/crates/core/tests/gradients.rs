//! Finite-difference checks of every differentiable operator.

mod common;

use common::gradcheck::{suite, worst_error, TOLERANCE};

fn check(names: &[&str]) {
    let suite = suite();
    for name in names {
        let (_, make) = suite.iter().find(|(n, _)| n == name).expect("registered check");
        let worst = worst_error(make.as_ref());
        println!("gradcheck {name:<24} worst relative error {worst:.2e}");
        assert!(worst < TOLERANCE, "{name}: relative error {worst:.3e}");
    }
}

#[test]
fn conv2d_gradients() {
    check(&["conv2d"]);
}

#[test]
fn conv_transpose2d_gradients() {
    check(&["conv_transpose2d"]);
}

#[test]
fn channel_bias_gradients() {
    check(&["channel_bias"]);
}

#[test]
fn instance_norm_gradients() {
    check(&["instance_norm"]);
}

#[test]
fn activation_gradients() {
    check(&["relu", "leaky_relu", "tanh", "sigmoid"]);
}

#[test]
fn linear_gradients() {
    check(&["linear"]);
}

#[test]
fn elementwise_gradients() {
    check(&["add", "affine"]);
}

#[test]
fn layout_gradients() {
    check(&["concat_channels", "reshape", "channels_last", "l2_normalize"]);
}

#[test]
fn loss_gradients() {
    check(&["softmax_cross_entropy", "l1_loss", "squared_error", "mse", "sum", "mean"]);
}

#[test]
fn composite_gradients() {
    check(&["composite"]);
}
