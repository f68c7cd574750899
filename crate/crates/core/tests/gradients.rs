mod common;

use common::*;
use kronsparse::network::Targets;
use kronsparse::{Activation, KronShape, LayerKind, LayerSpec, LossKind, Matrix, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(seed: u64, layers: usize, loss: LossKind) -> (Network, Matrix, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = random_specs(&mut rng, layers, 6, loss);
    let net = Network::init(&specs, &mut rng).unwrap();
    let batch = rng.random_range(1..=4);
    let x = Matrix::random_normal(batch, net.in_dim(), &mut rng);
    let y = Matrix::random_normal(batch, net.out_dim(), &mut rng);
    let labels = (0..batch).map(|_| rng.random_range(0..net.out_dim())).collect();
    (net, x, y, labels)
}

#[test]
fn finite_differences_on_random_stacks() {
    let mut seed = 0;
    for layers in [1, 2] {
        for loss in [LossKind::SquaredFrobenius, LossKind::SoftmaxCrossEntropy] {
            for _ in 0..15 {
                seed += 1;
                let (net, x, y, labels) = random_problem(seed, layers, loss);
                let targets = match loss {
                    LossKind::SquaredFrobenius => Targets::Values(&y),
                    LossKind::SoftmaxCrossEntropy => Targets::Labels(&labels),
                };
                let report = finite_difference_check(&net, &x, targets, loss);
                assert!(report.failures.is_empty(), "seed {seed} {:?}: {:?}", net.specs(), report.failures);
            }
        }
    }
}

#[test]
fn kron_layer_gradient_example() {
    // m=4, n=6, r=2 under the squared loss
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = KronShape::new(2, 3, 2, 2, 2).unwrap();
    let f = random_factor(&mut rng, shape);
    let net = Network::new(vec![kronsparse::network::Layer {
        params: kronsparse::network::LayerParams::Kron(f),
        activation: Activation::Identity,
    }])
    .unwrap();
    let x = Matrix::random_normal(3, 6, &mut rng);
    let y = Matrix::random_normal(3, 4, &mut rng);
    let report = finite_difference_check(&net, &x, Targets::Values(&y), LossKind::SquaredFrobenius);
    assert_eq!(report.checked, 6 + 2 * 6 + 2 * 4 + 18);
    assert!(report.failures.is_empty(), "{:?}", report.failures);
}

#[test]
fn factored_and_dense_networks_agree() {
    for seed in 0..40 {
        let (net, x, y, _) = random_problem(1000 + seed, 2, LossKind::SquaredFrobenius);
        let dense = net.to_dense();
        let a = net.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        assert!(a.output().max_abs_diff(b.output()) <= 1e-10);
        let ga = net.gradient(&x, Targets::Values(&y), LossKind::SquaredFrobenius, true).unwrap();
        let gb = dense.gradient(&x, Targets::Values(&y), LossKind::SquaredFrobenius, true).unwrap();
        assert!((ga.loss - gb.loss).abs() <= 1e-8);
        assert!(ga.input.unwrap().max_abs_diff(&gb.input.unwrap()) <= 1e-8);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Matrix::random_normal(5, 7, &mut rng).scale(300.0);
    let p = kronsparse::network::softmax(&logits);
    for i in 0..5 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn evaluation_is_reproducible() {
    let specs = vec![LayerSpec {
        kind: LayerKind::Kron {
            shape: KronShape::new(2, 4, 2, 2, 2).unwrap(),
        },
        activation: Activation::SoftmaxOutput,
    }];
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::init(&specs, &mut rng).unwrap();
        let x = Matrix::random_normal(9, 8, &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| i % 4).collect();
        net.evaluate(&x, Targets::Labels(&labels), &labels, LossKind::SoftmaxCrossEntropy)
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.accuracy, b.accuracy);
}
