//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod dd;

use kronsparse::blocks::{tile_grid, write_block};
use kronsparse::network::Targets;
use kronsparse::{Activation, KronFactor, KronShape, LayerKind, LayerSpec, LossKind, Matrix, Network, Plain};
use rand::seq::SliceRandom;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
pub const FD_ABS_TOL: f64 = 1e-8;

/// Divisor of `n` chosen uniformly.
pub fn random_divisor<R: Rng>(rng: &mut R, n: usize) -> usize {
    let ds: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
    ds[rng.random_range(0..ds.len())]
}

/// A valid shape for an `m×n` layer with a random tiling and rank.
pub fn random_shape_for<R: Rng>(rng: &mut R, m: usize, n: usize) -> KronShape {
    let m1 = random_divisor(rng, m);
    let n1 = random_divisor(rng, n);
    let (m2, n2) = (m / m1, n / n1);
    let r = rng.random_range(1..=(m1 * n1).min(m2 * n2));
    KronShape::new(m1, n1, m2, n2, r).unwrap()
}

/// Definitional oracle: `Σᵢ (S ⊙ Aᵢ) ⊗ Bᵢ` by direct indexing.
pub fn materialize_oracle(f: &KronFactor) -> Matrix {
    let s = f.shape();
    let mut w = Matrix::zeros(s.m(), s.n());
    for i in 0..s.r {
        for i1 in 0..s.m1 {
            for j1 in 0..s.n1 {
                let g = f.s()[(i1, j1)] * f.a()[i][(i1, j1)];
                for i2 in 0..s.m2 {
                    for j2 in 0..s.n2 {
                        w[(i1 * s.m2 + i2, j1 * s.n2 + j2)] += g * f.b()[i][(i2, j2)];
                    }
                }
            }
        }
    }
    w
}

pub fn random_factor<R: Rng>(rng: &mut R, shape: KronShape) -> KronFactor {
    let s = Matrix::random_normal(shape.m1, shape.n1, rng);
    let a = (0..shape.r).map(|_| Matrix::random_normal(shape.m1, shape.n1, rng)).collect();
    let b = (0..shape.r).map(|_| Matrix::random_normal(shape.m2, shape.n2, rng)).collect();
    KronFactor::new(shape, s, a, b).unwrap()
}

/// Random matrix with a random subset of its `m₂×n₂` tiles zeroed; returns
/// the matrix and the number of nonzero tiles.
pub fn random_block_sparse<R: Rng>(rng: &mut R, m: usize, n: usize, m2: usize, n2: usize, zero_fraction: f64) -> (Matrix, usize) {
    let mut w = Matrix::random_normal(m, n, rng);
    let (m1, n1) = tile_grid(&w, m2, n2).unwrap();
    let mut tiles: Vec<usize> = (0..m1 * n1).collect();
    tiles.shuffle(rng);
    let zeros = ((zero_fraction * tiles.len() as f64).round() as usize).min(tiles.len());
    for &t in &tiles[..zeros] {
        write_block(&mut w, &Matrix::zeros(m2, n2), t / n1, t % n1);
    }
    (w, m1 * n1 - zeros)
}

pub fn loss_value(net: &Network, x: &Matrix, targets: Targets<'_>, kind: LossKind) -> f64 {
    let cache = net.forward(x).unwrap();
    net.loss_with(&cache, targets, kind, &mut Plain).unwrap().value
}

/// Worst violation found by a finite-difference sweep.
#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

fn compare_component(report: &mut FdReport, what: String, analytic: f64, numeric: f64) {
    report.checked += 1;
    let ok = if analytic.abs() < FD_ABS_TOL {
        (analytic - numeric).abs() <= FD_ABS_TOL
    } else {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        report.worst_rel = report.worst_rel.max(rel);
        rel <= FD_REL_TOL
    };
    if !ok && report.failures.len() < 8 {
        report.failures.push(format!("{what}: analytic {analytic:e}, numeric {numeric:e}"));
    }
}

/// Checks every parameter gradient and the input gradient of `net` against
/// central differences of the network loss. The differenced losses are
/// evaluated in double-double precision by an independent forward pass.
pub fn finite_difference_check(net: &Network, x: &Matrix, targets: Targets<'_>, kind: LossKind) -> FdReport {
    use dd::{dd_loss, perturb, Dd, DdMat};
    let grad = net.gradient(x, targets, kind, true).unwrap();
    let specs = net.specs();
    let params: Vec<DdMat> = net.params().into_iter().map(DdMat::from_matrix).collect();
    let xd = DdMat::from_matrix(x);
    let two_h = Dd::from_f64(2.0 * FD_STEP);
    let mut report = FdReport::default();
    for (p, g) in grad.params().into_iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = params.clone();
            perturb(&mut plus[p], k, FD_STEP);
            let mut minus = params.clone();
            perturb(&mut minus[p], k, -FD_STEP);
            let up = dd_loss(&specs, &plus, &xd, targets, kind);
            let down = dd_loss(&specs, &minus, &xd, targets, kind);
            let numeric = ((up - down) / two_h).to_f64();
            compare_component(&mut report, format!("param {p}[{k}]"), g.data()[k], numeric);
        }
    }
    let dx = grad.input.expect("input gradient requested");
    for k in 0..x.len() {
        let mut plus = xd.clone();
        perturb(&mut plus, k, FD_STEP);
        let mut minus = xd.clone();
        perturb(&mut minus, k, -FD_STEP);
        let up = dd_loss(&specs, &params, &plus, targets, kind);
        let down = dd_loss(&specs, &params, &minus, targets, kind);
        let numeric = ((up - down) / two_h).to_f64();
        compare_component(&mut report, format!("x[{k}]"), dx.data()[k], numeric);
    }
    report
}

/// Random one- or two-layer stack with dims ≤ `max_dim`.
pub fn random_specs<R: Rng>(rng: &mut R, layers: usize, max_dim: usize, loss: LossKind) -> Vec<LayerSpec> {
    let mut dims = vec![rng.random_range(1..=max_dim)];
    for _ in 0..layers {
        dims.push(rng.random_range(2..=max_dim));
    }
    (0..layers)
        .map(|l| {
            let (n, m) = (dims[l], dims[l + 1]);
            let kind = if rng.random_bool(0.7) {
                LayerKind::Kron { shape: random_shape_for(rng, m, n) }
            } else {
                LayerKind::Dense { m, n }
            };
            let last = l + 1 == layers;
            let activation = if last {
                match loss {
                    LossKind::SoftmaxCrossEntropy => Activation::SoftmaxOutput,
                    LossKind::SquaredFrobenius if rng.random_bool(0.3) => Activation::Relu,
                    LossKind::SquaredFrobenius => Activation::Identity,
                }
            } else if rng.random_bool(0.5) {
                Activation::Relu
            } else {
                Activation::Identity
            };
            LayerSpec { kind, activation }
        })
        .collect()
}
