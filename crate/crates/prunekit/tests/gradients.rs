//! Analytic gradients against the central finite-difference oracle, plus
//! training-dynamics contracts that depend on them.

mod common;

use prunekit::data::Dataset;
use prunekit::layer::{DenseLayer, Layer};
use prunekit::network::{init_conv, init_dense, Network};
use prunekit::rng;
use prunekit::tensor::Tensor;

const EPS: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;

#[test]
fn conv_relu_gap_dense_gradients_match_finite_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 20 {
        seed += 1;
        let Some((net, input, label)) = common::random_conv_instance(seed) else {
            continue;
        };
        let worst = common::max_gradient_mismatch(&net, &input, label, EPS);
        assert!(
            worst <= REL_TOL,
            "seed {seed}: worst relative mismatch {worst}"
        );
        checked += 1;
    }
}

#[test]
fn dense_only_gradients_match_finite_differences() {
    for trial in 0..20 {
        let seed = 1000 + trial;
        let (net, input, label) = common::random_dense_instance(seed);
        let worst = common::max_gradient_mismatch(&net, &input, label, EPS);
        assert!(worst <= REL_TOL, "seed {seed}: mismatch {worst}");
    }
}

#[test]
fn separable_two_point_training_descends_monotonically() {
    // x0 = (1, 0) labeled 0, x1 = (0, 1) labeled 1.
    let images = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let data = Dataset::from_parts(images, vec![0, 1], 2).unwrap();
    let dense = DenseLayer::new(
        Tensor::from_vec(&[2, 2], vec![0.3, -0.1, 0.2, 0.4]).unwrap(),
        Tensor::zeros(&[2]),
    );
    let mut net = Network::new(vec![Layer::Flatten, Layer::Dense(dense)], 0).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(net.sgd_step(&data, &[0, 1], 0.1).unwrap());
    }
    for w in losses[..10].windows(2) {
        assert!(w[1] < w[0], "loss must fall on the separable pair: {w:?}");
    }
    assert!(losses[199] < 0.1, "final loss {}", losses[199]);
}

/// Masked-but-unfrozen filters must regain weight through training, and
/// frozen filters must stay exactly zero.
#[test]
fn soft_pruned_filters_regrow_and_frozen_filters_stay_zero() {
    let mut r = rng::rng_from(9);
    let mut conv = init_conv(&mut r, 4, 1, 3, 1, 1);
    conv.zero_filter(0, false); // soft
    conv.zero_filter(1, true); // hard
    let dense = init_dense(&mut r, 2, 4);
    let mut net = Network::new(
        vec![
            Layer::Conv(conv),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense(dense),
        ],
        9,
    )
    .unwrap();
    let data = prunekit::data::make_synthetic(4, 32, 2, 8).unwrap();
    net.train_one_epoch(&data, 0.05, 8, 77).unwrap();

    let Layer::Conv(conv) = &net.layers[0] else {
        unreachable!()
    };
    let per = 9;
    let soft_weights = &conv.filters.data()[0..per];
    assert!(
        soft_weights.iter().any(|v| *v != 0.0),
        "soft-pruned filter stayed zero after a training epoch"
    );
    assert!(conv.mask[0], "updated filter is live again");
    let hard_weights = &conv.filters.data()[per..2 * per];
    assert!(hard_weights.iter().all(|v| *v == 0.0));
    assert!(!conv.mask[1] && conv.frozen[1]);
}
