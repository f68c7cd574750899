//! Closed-form FLOP counts for dense and factored training steps, and an
//! instrumented counter that runs the real kernels and tallies every scalar
//! operation they execute.
//!
//! Convention: one flop per scalar multiply, add, subtract, divide,
//! comparison, `exp` or `ln`. A length-`k` dot product costs `2k − 1`. The
//! squared loss `‖O − Y‖²` costs `3Nm − 1` and its seed `2(O − Y)` costs
//! `Nm`. A ReLU costs one flop per scalar forward and one per scalar for its
//! derivative mask. A plain gradient step costs two flops per parameter.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arith::FlopCounter;
use crate::error::{Error, Result};
use crate::kron::KronShape;
use crate::matrix::Matrix;
use crate::network::{Activation, LayerKind, LayerSpec, LossKind, Network, Targets};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub forward: u64,
    pub backward: u64,
    pub update: u64,
    /// Per-step counts; their sum is `forward + backward + update`.
    pub breakdown: BTreeMap<String, u64>,
    /// Named per-rank constants (two-layer reports only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, u64>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.forward + self.backward + self.update
    }

    pub fn training(&self) -> u64 {
        self.total()
    }

    fn from_parts(breakdown: BTreeMap<String, u64>) -> Self {
        let mut report = FlopReport {
            forward: 0,
            backward: 0,
            update: 0,
            breakdown: BTreeMap::new(),
            constants: BTreeMap::new(),
        };
        for (k, v) in breakdown {
            if v == 0 {
                continue;
            }
            if k == "update" {
                report.update += v;
            } else if k.contains(".fwd") || k == "loss.fwd" {
                report.forward += v;
            } else {
                report.backward += v;
            }
            report.breakdown.insert(k, v);
        }
        report
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// `Nm(2n − 1) + 3Nm − 1`: one dense layer and the squared loss.
pub fn dense_forward_flops(batch: usize, m: usize, n: usize) -> u64 {
    let (nn, m, n) = (u(batch), u(m), u(n));
    nn * m * (2 * n - 1) + 3 * nn * m - 1
}

/// `Nm + mn(2N − 1)`: loss seed and weight gradient.
pub fn dense_backward_flops(batch: usize, m: usize, n: usize) -> u64 {
    let (nn, m, n) = (u(batch), u(m), u(n));
    nn * m + m * n * (2 * nn - 1)
}

/// Flops of one factored layer's output, without the loss.
fn kron_layer_forward_parts(batch: usize, s: &KronShape) -> [(&'static str, u64); 4] {
    let (nn, m1, n1, m2, n2, r) = (u(batch), u(s.m1), u(s.n1), u(s.m2), u(s.n2), u(s.r));
    [
        ("fwd.bx", r * nn * n1 * m2 * (2 * n2 - 1)),
        ("fwd.mask", r * m1 * n1),
        ("fwd.mid", r * nn * m1 * m2 * (2 * n1 - 1)),
        ("fwd.sum", (r - 1) * nn * m1 * m2),
    ]
}

/// Parameter-gradient flops of one factored layer (no loss seed, no input
/// gradient).
fn kron_layer_backward_parts(batch: usize, s: &KronShape) -> [(&'static str, u64); 5] {
    let (nn, m1, n1, m2, n2, r) = (u(batch), u(s.m1), u(s.n1), u(s.m2), u(s.n2), u(s.r));
    [
        ("bwd.g", r * m1 * n1 * (2 * nn * m2 - 1)),
        ("bwd.ds", r * m1 * n1 + (r - 1) * m1 * n1),
        ("bwd.da", r * m1 * n1),
        ("bwd.dmid", r * nn * m2 * n1 * (2 * m1 - 1)),
        ("bwd.db", r * m2 * n2 * (2 * nn * n1 - 1)),
    ]
}

fn kron_input_grad_parts(batch: usize, s: &KronShape) -> [(&'static str, u64); 2] {
    let (nn, n1, m2, n2, r) = (u(batch), u(s.n1), u(s.m2), u(s.n2), u(s.r));
    [
        ("bwd.dx", r * n2 * nn * n1 * (2 * m2 - 1)),
        ("bwd.dxsum", (r - 1) * nn * n1 * n2),
    ]
}

/// `r(Nm₁m₂(2n₁ − 1) + m₁n₁ + Nn₁m₂(2n₂ − 1)) + (r − 1)Nm + 3Nm − 1`.
pub fn kron_forward_flops(batch: usize, shape: &KronShape) -> u64 {
    let layer: u64 = kron_layer_forward_parts(batch, shape).iter().map(|p| p.1).sum();
    layer + 3 * u(batch) * u(shape.m()) - 1
}

/// `Nm + rm₁n₁(2Nm₂ − 1) + rm₁n₁ + (r − 1)m₁n₁ + rm₁n₁ + rNm₂n₁(2m₁ − 1) + rm₂n₂(2Nn₁ − 1)`.
pub fn kron_backward_flops(batch: usize, shape: &KronShape) -> u64 {
    let layer: u64 = kron_layer_backward_parts(batch, shape).iter().map(|p| p.1).sum();
    u(batch) * u(shape.m()) + layer
}

/// Extra flops for the gradient with respect to a factored layer's input.
pub fn kron_input_grad_flops(batch: usize, shape: &KronShape) -> u64 {
    kron_input_grad_parts(batch, shape).iter().map(|p| p.1).sum()
}

/// Extra flops for the gradient with respect to a dense layer's input.
pub fn dense_input_grad_flops(batch: usize, m: usize, n: usize) -> u64 {
    u(batch) * u(n) * (2 * u(m) - 1)
}

/// Plain gradient step: scale and subtract, per parameter.
pub fn update_flops(params: usize) -> u64 {
    2 * u(params)
}

fn loss_parts(batch: usize, m: usize, loss: LossKind) -> (u64, u64) {
    let (nn, m) = (u(batch), u(m));
    match loss {
        LossKind::SquaredFrobenius => (3 * nn * m - 1, nn * m),
        // per row: max (m−1), shift (m), exp (m), sum (m−1), ln, pick; then
        // the batch mean (N−1 adds, one divide)
        LossKind::SoftmaxCrossEntropy => (4 * nn * m + nn, nn * (2 * m + 1) + 1),
    }
}

/// Full analytic report for one training step of a layer stack on a batch
/// of `batch` rows. Breakdown keys match the labels of an instrumented run.
pub fn network_flops(specs: &[LayerSpec], batch: usize, loss: LossKind) -> Result<FlopReport> {
    crate::network::validate_specs(specs)?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut parts: BTreeMap<String, u64> = BTreeMap::new();
    let mut put = |k: String, v: u64| {
        *parts.entry(k).or_insert(0) += v;
    };
    let nn = u(batch);
    for (l, spec) in specs.iter().enumerate() {
        let p = format!("L{l}.");
        match &spec.kind {
            LayerKind::Kron { shape } => {
                for (k, v) in kron_layer_forward_parts(batch, shape) {
                    put(format!("{p}{k}"), v);
                }
                for (k, v) in kron_layer_backward_parts(batch, shape) {
                    put(format!("{p}{k}"), v);
                }
                if l > 0 {
                    for (k, v) in kron_input_grad_parts(batch, shape) {
                        put(format!("{p}{k}"), v);
                    }
                }
            }
            LayerKind::Dense { m, n } => {
                let (m, n) = (u(*m), u(*n));
                put(format!("{p}fwd.matmul"), nn * m * (2 * n - 1));
                put(format!("{p}bwd.dw"), m * n * (2 * nn - 1));
                if l > 0 {
                    put(format!("{p}bwd.dx"), nn * n * (2 * m - 1));
                }
            }
        }
        if spec.activation == Activation::Relu {
            let m = u(spec.kind.out_dim());
            put(format!("{p}fwd.act"), nn * m);
            put(format!("{p}bwd.act"), nn * m);
        }
    }
    let out = specs.last().expect("validated").kind.out_dim();
    let (lf, ls) = loss_parts(batch, out, loss);
    put("loss.fwd".into(), lf);
    put("loss.seed".into(), ls);
    let params: usize = specs.iter().map(|s| s.kind.param_count()).sum();
    put("update".into(), update_flops(params));
    Ok(FlopReport::from_parts(parts))
}

/// Layer pair for the two-layer report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TwoLayer {
    /// Widths `m¹ → m² → m³`.
    Dense { m1: usize, m2: usize, m3: usize },
    Kron { first: KronShape, second: KronShape },
}

impl TwoLayer {
    pub fn specs(&self) -> Vec<LayerSpec> {
        let (a, b) = match *self {
            TwoLayer::Dense { m1, m2, m3 } => (
                LayerKind::Dense { m: m2, n: m1 },
                LayerKind::Dense { m: m3, n: m2 },
            ),
            TwoLayer::Kron { first, second } => (
                LayerKind::Kron { shape: first },
                LayerKind::Kron { shape: second },
            ),
        };
        vec![
            LayerSpec {
                kind: a,
                activation: Activation::Relu,
            },
            LayerSpec {
                kind: b,
                activation: Activation::Identity,
            },
        ]
    }
}

/// Per-rank matmul cost of a factored layer's forward pass:
/// `N n₁ m₂ (2n₂ − 1) + N m₂ m₁ (2n₁ − 1)`.
pub fn forward_rank_cost(batch: usize, s: &KronShape) -> u64 {
    let one = KronShape { r: 1, ..*s };
    let p = kron_layer_forward_parts(batch, &one);
    p[0].1 + p[2].1
}

/// Per-rank matmul cost of a factored layer's backward pass, optionally
/// including the input-gradient product.
pub fn backward_rank_cost(batch: usize, s: &KronShape, with_input: bool) -> u64 {
    let one = KronShape { r: 1, ..*s };
    let p = kron_layer_backward_parts(batch, &one);
    let mut c = p[0].1 + p[3].1 + p[4].1;
    if with_input {
        c += kron_input_grad_parts(batch, &one)[0].1;
    }
    c
}

/// Two-layer regression model `W² σ(W¹ x)` with ReLU and squared loss.
///
/// For the factored variant the report carries `C1..C4`: the per-rank
/// matmul costs of layer 1 forward, layer 2 forward, layer 2 backward
/// (including the input gradient) and layer 1 backward.
pub fn two_layer_flops(batch: usize, model: &TwoLayer) -> Result<FlopReport> {
    let mut report = network_flops(&model.specs(), batch, LossKind::SquaredFrobenius)?;
    if let TwoLayer::Kron { first, second } = model {
        report.constants.insert("C1".into(), forward_rank_cost(batch, first));
        report.constants.insert("C2".into(), forward_rank_cost(batch, second));
        report.constants.insert("C3".into(), backward_rank_cost(batch, second, true));
        report.constants.insert("C4".into(), backward_rank_cost(batch, first, false));
    }
    Ok(report)
}

/// Computations the instrumented counter can run.
#[derive(Debug, Clone, PartialEq)]
pub enum Computation {
    DenseForward { batch: usize, m: usize, n: usize },
    DenseBackward { batch: usize, m: usize, n: usize },
    KronForward { batch: usize, shape: KronShape },
    KronBackward { batch: usize, shape: KronShape },
    TwoLayerForward { batch: usize, model: TwoLayer },
    TwoLayerBackward { batch: usize, model: TwoLayer },
    /// Arbitrary stack; forward, backward and update are all executed.
    Network { batch: usize, specs: Vec<LayerSpec>, loss: LossKind },
}

impl Computation {
    /// Builds a computation from its tag (`dense-forward`, `dense-backward`,
    /// `kron-forward`, `kron-backward`, `two-layer-forward`,
    /// `two-layer-backward`).
    pub fn from_tag(tag: &str, batch: usize, specs: &[LayerSpec]) -> Result<Self> {
        let single = |want_kron: bool| -> Result<LayerKind> {
            match specs {
                [s] if matches!(s.kind, LayerKind::Kron { .. }) == want_kron => Ok(s.kind),
                _ => Err(Error::InvalidArgument(format!(
                    "`{tag}` needs exactly one {} layer",
                    if want_kron { "kron" } else { "dense" }
                ))),
            }
        };
        let pair = || -> Result<TwoLayer> {
            match specs {
                [a, b] => match (a.kind, b.kind) {
                    (LayerKind::Dense { m: m2, n: m1 }, LayerKind::Dense { m: m3, n }) if n == m2 => {
                        Ok(TwoLayer::Dense { m1, m2, m3 })
                    }
                    (LayerKind::Kron { shape: first }, LayerKind::Kron { shape: second })
                        if first.m() == second.n() =>
                    {
                        Ok(TwoLayer::Kron { first, second })
                    }
                    _ => Err(Error::InvalidArgument(format!(
                        "`{tag}` needs two chained layers of the same kind"
                    ))),
                },
                _ => Err(Error::InvalidArgument(format!("`{tag}` needs exactly two layers"))),
            }
        };
        Ok(match tag {
            "dense-forward" | "dense-backward" => {
                let LayerKind::Dense { m, n } = single(false)? else { unreachable!() };
                if tag == "dense-forward" {
                    Computation::DenseForward { batch, m, n }
                } else {
                    Computation::DenseBackward { batch, m, n }
                }
            }
            "kron-forward" | "kron-backward" => {
                let LayerKind::Kron { shape } = single(true)? else { unreachable!() };
                if tag == "kron-forward" {
                    Computation::KronForward { batch, shape }
                } else {
                    Computation::KronBackward { batch, shape }
                }
            }
            "two-layer-forward" => Computation::TwoLayerForward { batch, model: pair()? },
            "two-layer-backward" => Computation::TwoLayerBackward { batch, model: pair()? },
            other => return Err(Error::UnknownTag(other.to_string())),
        })
    }

    /// Analytic count for this computation.
    pub fn analytic(&self) -> Result<u64> {
        Ok(match self {
            Computation::DenseForward { batch, m, n } => dense_forward_flops(*batch, *m, *n),
            Computation::DenseBackward { batch, m, n } => dense_backward_flops(*batch, *m, *n),
            Computation::KronForward { batch, shape } => kron_forward_flops(*batch, shape),
            Computation::KronBackward { batch, shape } => kron_backward_flops(*batch, shape),
            Computation::TwoLayerForward { batch, model } => two_layer_flops(*batch, model)?.forward,
            Computation::TwoLayerBackward { batch, model } => two_layer_flops(*batch, model)?.backward,
            Computation::Network { batch, specs, loss } => network_flops(specs, *batch, *loss)?.total(),
        })
    }
}

fn dense_spec(m: usize, n: usize) -> Vec<LayerSpec> {
    vec![LayerSpec {
        kind: LayerKind::Dense { m, n },
        activation: Activation::Identity,
    }]
}

fn kron_spec(shape: KronShape) -> Vec<LayerSpec> {
    vec![LayerSpec {
        kind: LayerKind::Kron { shape },
        activation: Activation::Identity,
    }]
}

/// Counted forward, backward and update phases of one step.
#[derive(Debug, Clone)]
pub struct CountedStep {
    pub forward: FlopCounter,
    pub backward: FlopCounter,
    pub update: FlopCounter,
}

impl CountedStep {
    /// Merged per-label tallies of all three phases.
    pub fn breakdown(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for c in [&self.forward, &self.backward, &self.update] {
            for (k, v) in c.breakdown() {
                *out.entry(k.clone()).or_insert(0) += v;
            }
        }
        out
    }

    pub fn report(&self) -> FlopReport {
        FlopReport::from_parts(self.breakdown())
    }
}

/// Runs one forward/backward/update step of a freshly initialized network
/// on random data with counting arithmetic.
pub fn count_network_step(
    specs: &[LayerSpec],
    batch: usize,
    loss: LossKind,
    seed: u64,
) -> Result<CountedStep> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::init(specs, &mut rng)?;
    let x = Matrix::random_normal(batch, net.in_dim(), &mut rng);
    let y = Matrix::random_normal(batch, net.out_dim(), &mut rng);
    let labels = y.argmax_rows();
    let targets = match loss {
        LossKind::SquaredFrobenius => Targets::Values(&y),
        LossKind::SoftmaxCrossEntropy => Targets::Labels(&labels),
    };

    let mut fwd = FlopCounter::new();
    let cache = net.forward_with(&x, &mut fwd)?;
    let eval = net.loss_with(&cache, targets, loss, &mut fwd)?;

    let mut bwd = FlopCounter::new();
    let grad = net.backward_with(&cache, &eval, false, &mut bwd)?;

    let mut upd = FlopCounter::new();
    let mut stepped = net.clone();
    crate::train::sgd_step_with(&mut stepped, &grad, 0.01, &mut upd);

    Ok(CountedStep {
        forward: fwd,
        backward: bwd,
        update: upd,
    })
}

/// Executes `comp` with counting arithmetic and returns the tally.
pub fn instrumented_count(comp: &Computation, seed: u64) -> Result<u64> {
    let step = match comp {
        Computation::DenseForward { batch, m, n } | Computation::DenseBackward { batch, m, n } => {
            count_network_step(&dense_spec(*m, *n), *batch, LossKind::SquaredFrobenius, seed)?
        }
        Computation::KronForward { batch, shape } | Computation::KronBackward { batch, shape } => {
            count_network_step(&kron_spec(*shape), *batch, LossKind::SquaredFrobenius, seed)?
        }
        Computation::TwoLayerForward { batch, model }
        | Computation::TwoLayerBackward { batch, model } => {
            count_network_step(&model.specs(), *batch, LossKind::SquaredFrobenius, seed)?
        }
        Computation::Network { batch, specs, loss } => count_network_step(specs, *batch, *loss, seed)?,
    };
    Ok(match comp {
        Computation::DenseForward { .. }
        | Computation::KronForward { .. }
        | Computation::TwoLayerForward { .. } => step.forward.total(),
        Computation::DenseBackward { .. }
        | Computation::KronBackward { .. }
        | Computation::TwoLayerBackward { .. } => step.backward.total(),
        Computation::Network { .. } => {
            step.forward.total() + step.backward.total() + step.update.total()
        }
    })
}

/// Tag-driven entry point: unknown tags are an error.
pub fn instrumented_count_tag(tag: &str, batch: usize, specs: &[LayerSpec], seed: u64) -> Result<u64> {
    instrumented_count(&Computation::from_tag(tag, batch, specs)?, seed)
}

/// Analytic and instrumented reports side by side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopComparison {
    pub analytic: FlopReport,
    pub instrumented: FlopReport,
    pub equal: bool,
}

pub fn compare(specs: &[LayerSpec], batch: usize, loss: LossKind, seed: u64) -> Result<FlopComparison> {
    let analytic = network_flops(specs, batch, loss)?;
    let instrumented = count_network_step(specs, batch, loss, seed)?.report();
    let equal = analytic.forward == instrumented.forward
        && analytic.backward == instrumented.backward
        && analytic.update == instrumented.update
        && analytic.breakdown == instrumented.breakdown;
    Ok(FlopComparison {
        analytic,
        instrumented,
        equal,
    })
}
