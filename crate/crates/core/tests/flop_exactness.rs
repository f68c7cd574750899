use kronsparse::flops::{
    compare, instrumented_count, network_flops, two_layer_flops, Computation, TwoLayer,
};
use kronsparse::{Activation, KronShape, LayerKind, LayerSpec, LossKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_shape(rng: &mut ChaCha8Rng, max: usize) -> KronShape {
    loop {
        let m1 = rng.random_range(1..=max);
        let n1 = rng.random_range(1..=max);
        let m2 = rng.random_range(1..=max);
        let n2 = rng.random_range(1..=max);
        if m1 * m2 > 32 || n1 * n2 > 32 {
            continue;
        }
        let ceiling = (m1 * n1).min(m2 * n2);
        let r = rng.random_range(1..=ceiling);
        return KronShape::new(m1, n1, m2, n2, r).unwrap();
    }
}

fn single(kind: LayerKind) -> Vec<LayerSpec> {
    vec![LayerSpec {
        kind,
        activation: Activation::Identity,
    }]
}

#[test]
fn single_layer_formulas_match_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = rng.random_range(1..=8);
        let shape = random_shape(&mut rng, 8);
        for comp in [
            Computation::KronForward { batch: n, shape },
            Computation::KronBackward { batch: n, shape },
            Computation::DenseForward {
                batch: n,
                m: shape.m(),
                n: shape.n(),
            },
            Computation::DenseBackward {
                batch: n,
                m: shape.m(),
                n: shape.n(),
            },
        ] {
            assert_eq!(
                instrumented_count(&comp, case).unwrap(),
                comp.analytic().unwrap(),
                "case {case}: {comp:?}"
            );
        }
    }
}

#[test]
fn two_layer_reports_match_counter_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..60 {
        let batch = rng.random_range(1..=6);
        let first = random_shape(&mut rng, 6);
        // second layer consumes the first layer's output
        let second = loop {
            let s = random_shape(&mut rng, 6);
            let n = first.m();
            let n1s: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
            let n1 = n1s[rng.random_range(0..n1s.len())];
            let cand = KronShape::new(s.m1, n1, s.m2, n / n1, 1);
            if let Ok(c) = cand {
                if c.m() <= 32 {
                    break c;
                }
            }
        };
        for model in [
            TwoLayer::Kron { first, second },
            TwoLayer::Dense {
                m1: first.n(),
                m2: first.m(),
                m3: second.m(),
            },
        ] {
            let report = two_layer_flops(batch, &model).unwrap();
            let cmp = compare(&model.specs(), batch, LossKind::SquaredFrobenius, case).unwrap();
            assert!(cmp.equal, "case {case}: {:#?}", cmp);
            assert_eq!(report.forward, cmp.instrumented.forward);
            assert_eq!(report.backward, cmp.instrumented.backward);
            if let TwoLayer::Kron { first, second } = model {
                let b = &cmp.instrumented.breakdown;
                let get = |k: &str| b.get(k).copied().unwrap_or(0);
                let r1 = first.r as u64;
                let r2 = second.r as u64;
                assert_eq!(report.constants["C1"] * r1, get("L0.fwd.bx") + get("L0.fwd.mid"));
                assert_eq!(report.constants["C2"] * r2, get("L1.fwd.bx") + get("L1.fwd.mid"));
                assert_eq!(
                    report.constants["C3"] * r2,
                    get("L1.bwd.g") + get("L1.bwd.dmid") + get("L1.bwd.db") + get("L1.bwd.dx")
                );
                assert_eq!(
                    report.constants["C4"] * r1,
                    get("L0.bwd.g") + get("L0.bwd.dmid") + get("L0.bwd.db")
                );
            }
        }
    }
}

#[test]
fn mixed_stacks_and_cross_entropy_match_counter() {
    let specs = vec![
        LayerSpec {
            kind: LayerKind::Kron {
                shape: KronShape::new(3, 2, 2, 3, 2).unwrap(),
            },
            activation: Activation::Relu,
        },
        LayerSpec {
            kind: LayerKind::Dense { m: 4, n: 6 },
            activation: Activation::Relu,
        },
        LayerSpec {
            kind: LayerKind::Kron {
                shape: KronShape::new(2, 2, 3, 2, 3).unwrap(),
            },
            activation: Activation::SoftmaxOutput,
        },
    ];
    for loss in [LossKind::SquaredFrobenius, LossKind::SoftmaxCrossEntropy] {
        for batch in [1, 3, 7] {
            let cmp = compare(&specs, batch, loss, 3).unwrap();
            assert!(cmp.equal, "{loss:?} N={batch}: {cmp:#?}");
        }
    }
}

#[test]
fn monotone_in_every_dimension() {
    let base = (2usize, 3usize, 2usize, 2usize);
    let eval = |n: usize, d: (usize, usize, usize, usize)| {
        let s = KronShape::with_any_rank(d.0, d.1, d.2, d.3, 1).unwrap();
        (
            kronsparse::flops::kron_forward_flops(n, &s),
            kronsparse::flops::kron_backward_flops(n, &s),
        )
    };
    for n in 1..6 {
        let (f, b) = eval(n, base);
        let (f2, b2) = eval(n + 1, base);
        assert!(f2 >= f && b2 >= b);
        for bump in 0..4 {
            let mut d = base;
            match bump {
                0 => d.0 += 1,
                1 => d.1 += 1,
                2 => d.2 += 1,
                _ => d.3 += 1,
            }
            let (f3, b3) = eval(n, d);
            assert!(f3 >= f && b3 >= b, "bump {bump}");
        }
    }
}

#[test]
fn backward_leading_term_ratio() {
    // Nm + Nr(4m₁m₂n₁ − m₂n₁ + 2m₂n₁n₂) dominates as N grows.
    let s = KronShape::new(4, 8, 2, 32, 1).unwrap();
    let ratio = |n: usize| {
        let (nn, m1, n1, m2, n2, r) = (n as f64, 4.0, 8.0, 2.0, 32.0, 1.0);
        let lead = nn * 8.0 + nn * r * (4.0 * m1 * m2 * n1 - m2 * n1 + 2.0 * m2 * n1 * n2);
        kronsparse::flops::kron_backward_flops(n, &s) as f64 / lead
    };
    assert!((ratio(1_000_000) - 1.0).abs() < 1e-4);
}

#[test]
fn update_flops_below_dense_when_rank_is_half_the_ceiling() {
    for m in 1..=12 {
        for n in 1..=12 {
            let sol = kronsparse::shape::optimal_shape(m, n).unwrap();
            let c = sol.best;
            let ceiling = (c.m1 * c.n1).min(c.m2 * c.n2);
            for r in 1..=ceiling / 2 {
                assert!(r * (c.m1 * c.n1 + c.m2 * c.n2) <= m * n, "{m}x{n} r={r}");
            }
        }
    }
}

#[test]
fn report_serializes_with_breakdown() {
    let report = network_flops(
        &single(LayerKind::Dense { m: 2, n: 3 }),
        2,
        LossKind::SquaredFrobenius,
    )
    .unwrap();
    let json = serde_json::to_value(&report).unwrap();
    for key in ["forward", "backward", "update", "breakdown"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn counted_run_equals_formula(
        m1 in 1usize..5, n1 in 1usize..5, m2 in 1usize..5, n2 in 1usize..5, batch in 1usize..5, seed in 0u64..1000,
    ) {
        let r = (m1 * n1).min(m2 * n2);
        let shape = KronShape::new(m1, n1, m2, n2, r).unwrap();
        let cmp = compare(&single(LayerKind::Kron { shape }), batch, LossKind::SquaredFrobenius, seed).unwrap();
        prop_assert!(cmp.equal);
    }
}
