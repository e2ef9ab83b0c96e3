mod support;

use gil_core::gan::PenaltyScope;
use support::*;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..3 {
        for (name, err) in all_op_errors(seed) {
            assert!(err < 1e-4, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn mlp_gradients_match_central_differences() {
    for (shape, act) in MLP_SHAPES {
        for seed in 0..2 {
            let err = mlp_error(shape, act, seed);
            assert!(err < 1e-4, "{shape:?} {act:?}: relative error {err:e}");
        }
    }
}

#[test]
fn penalty_second_derivative_matches_central_differences() {
    for scope in [PenaltyScope::Feature, PenaltyScope::Joint] {
        for seed in 0..10 {
            let err = penalty_error(seed, scope);
            assert!(err < 1e-3, "critic {seed} ({scope:?}): relative error {err:e}");
        }
    }
}

#[test]
fn two_layer_forward_matches_scalar_loops() {
    use gil_core::nn::{Activation, Graph, Mlp};
    use gil_core::rng;
    let mut r = rng::stream(4, "golden");
    let net = Mlp::init(&[4, 6, 3], Activation::LeakyRelu(0.2), Activation::Linear, &mut r);
    let x = random_tensor(&mut r, 5, 4);
    let applied = net.apply(&x).unwrap();
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let traced = net.forward(&mut g, input).unwrap();
    let traced = g.value(traced.output).clone();
    for i in 0..5 {
        let want = oracles::mlp_forward(&net, x.row_slice(i));
        for j in 0..3 {
            assert!((applied.get(i, j) - want[j]).abs() < 1e-12);
            assert!((traced.get(i, j) - want[j]).abs() < 1e-12);
        }
    }
}
