//! Analytic gradients against central finite differences, in double precision.

mod common;

use branchynet_core::graph::Network;
use branchynet_core::layers::LayerSpec;
use common::checks::{check_joint_gradients, check_layer_gradients, layer_cases};
use common::{three_exit_8x8, tiny_two_exit};

fn check_kind(pick: impl Fn(&LayerSpec) -> bool) {
    let cases: Vec<_> = layer_cases().into_iter().filter(|(s, _, _)| pick(s)).collect();
    assert!(!cases.is_empty());
    for (spec, input, batch) in cases {
        check_layer_gradients(spec, &input, batch);
    }
}

#[test]
fn conv_gradients() {
    check_kind(|s| matches!(s, LayerSpec::Conv { .. }));
}

#[test]
fn dense_gradients() {
    check_kind(|s| matches!(s, LayerSpec::Dense { .. }));
}

#[test]
fn relu_gradients() {
    check_kind(|s| matches!(s, LayerSpec::ReLU));
}

#[test]
fn maxpool_gradients() {
    check_kind(|s| matches!(s, LayerSpec::MaxPool { .. }));
}

#[test]
fn flatten_gradients() {
    check_kind(|s| matches!(s, LayerSpec::Flatten));
}

#[test]
fn joint_loss_gradients_two_exits() {
    let net = Network::new(tiny_two_exit()).unwrap();
    let n: usize = net.param_decls().iter().map(|d| d.dims.iter().product::<usize>()).sum();
    assert!(n <= 500, "tiny network has {n} parameters");
    check_joint_gradients(&net, &[1.0, 0.3], 3);
    check_joint_gradients(&net, &[0.7, 1.0], 2);
}

#[test]
fn joint_loss_gradients_three_exits() {
    let net = Network::new(three_exit_8x8()).unwrap();
    check_joint_gradients(&net, &[1.0, 0.5, 0.3], 2);
}
