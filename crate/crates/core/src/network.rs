//! Layer stacks of factored or dense linear maps with element-wise
//! activations, losses, and end-to-end backpropagation.
//!
//! Layers have no bias term. Every kernel runs through an [`Arith`] context
//! and tags its work with `L{index}.{fwd|bwd}.{step}` so counted runs line
//! up with the analytic FLOP breakdown.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{Arith, Plain};
use crate::error::{Error, Result};
use crate::kron::{KronCache, KronFactor, KronGradient, KronShape};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
    /// Identity on the layer output; the softmax lives in the loss.
    SoftmaxOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `J = ‖O − Y‖²_F`, seed `2(O − Y)`.
    SquaredFrobenius,
    /// Mean cross-entropy of `softmax(O)`, seed `(softmax(O) − onehot(y)) / N`.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Kron { shape: KronShape },
    Dense { m: usize, n: usize },
}

impl LayerKind {
    pub fn in_dim(&self) -> usize {
        match self {
            LayerKind::Kron { shape } => shape.n(),
            LayerKind::Dense { n, .. } => *n,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerKind::Kron { shape } => shape.m(),
            LayerKind::Dense { m, .. } => *m,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerKind::Kron { shape } => crate::kron::count_params(shape),
            LayerKind::Dense { m, n } => m * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: Activation,
}

/// Checks that consecutive layers chain (`out` of layer l equals `in` of l+1).
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    for (l, pair) in specs.windows(2).enumerate() {
        if pair[0].kind.out_dim() != pair[1].kind.in_dim() {
            return Err(Error::shape(
                "network layers",
                format!("layer {} input width {}", l + 1, pair[0].kind.out_dim()),
                format!("{}", pair[1].kind.in_dim()),
            ));
        }
    }
    for s in specs {
        if let LayerKind::Dense { m, n } = s.kind {
            if m == 0 || n == 0 {
                return Err(Error::InvalidArgument("dense layer dims must be positive".into()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Kron(KronFactor),
    Dense(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub params: LayerParams,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        let kind = match &self.params {
            LayerParams::Kron(f) => LayerKind::Kron { shape: *f.shape() },
            LayerParams::Dense(w) => LayerKind::Dense {
                m: w.rows(),
                n: w.cols(),
            },
        };
        LayerSpec {
            kind,
            activation: self.activation,
        }
    }

    /// Dense `m x n` weight of this layer.
    pub fn weight(&self) -> Matrix {
        match &self.params {
            LayerParams::Kron(f) => f.materialize(),
            LayerParams::Dense(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Regression values or class labels.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Values(&'a Matrix),
    Labels(&'a [usize]),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Kron(KronCache),
    Dense(Matrix),
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    layers: Vec<LayerCache>,
    pre_activations: Vec<Option<Matrix>>,
    output: Matrix,
}

impl NetCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

#[derive(Debug, Clone)]
enum LossState {
    Squared { residual: Matrix },
    Softmax { exps: Matrix, sums: Vec<f64>, labels: Vec<usize> },
}

/// Loss value plus what the seed gradient needs.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    state: LossState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Kron(KronGradient),
    Dense { dw: Matrix, dx: Option<Matrix> },
}

impl LayerGrad {
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            LayerGrad::Kron(g) => g.params(),
            LayerGrad::Dense { dw, .. } => vec![dw],
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetGradient {
    pub layers: Vec<LayerGrad>,
    pub loss: f64,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Matrix>,
}

impl NetGradient {
    /// Gradients in the same order as [`Network::params`].
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(LayerGrad::params).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Per-sample mean loss.
    pub loss: f64,
    pub accuracy: f64,
}

fn tag<A: Arith>(ar: &mut A, label: impl FnOnce() -> String) {
    if ar.counts() {
        ar.label(&label());
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {c} out of range for {classes} outputs"
            )));
        }
        y[(i, c)] = 1.0;
    }
    Ok(y)
}

/// Glorot-uniform dense weight.
pub fn init_dense<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (m + n) as f64).sqrt();
    Matrix::random_uniform(m, n, bound, rng)
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(Layer::spec).collect();
        validate_specs(&specs)?;
        Ok(Self { layers })
    }

    /// Random initialization of every layer, in order, from one generator.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let params = match s.kind {
                    LayerKind::Kron { shape } => LayerParams::Kron(KronFactor::init(shape, rng)),
                    LayerKind::Dense { m, n } => LayerParams::Dense(init_dense(m, n, rng)),
                };
                Layer {
                    params,
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec().kind.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec().kind.out_dim()
    }

    pub fn has_kron(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.params, LayerParams::Kron(_)))
    }

    pub fn param_count(&self) -> usize {
        self.specs().iter().map(|s| s.kind.param_count()).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| match &l.params {
                LayerParams::Kron(f) => f.params(),
                LayerParams::Dense(w) => vec![w],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| match &mut l.params {
                LayerParams::Kron(f) => f.params_mut(),
                LayerParams::Dense(w) => vec![w],
            })
            .collect()
    }

    /// Same network with every factored layer replaced by its dense weight.
    pub fn to_dense(&self) -> Network {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    params: LayerParams::Dense(l.weight()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<NetCache> {
        self.forward_with(x, &mut Plain)
    }

    pub fn forward_with<A: Arith>(&self, x: &Matrix, ar: &mut A) -> Result<NetCache> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "network forward",
                format!("input width {}", self.in_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let out = match &layer.params {
                LayerParams::Kron(f) => {
                    let (o, cache) = f.forward_with(&h, ar, &format!("L{l}."))?;
                    caches.push(LayerCache::Kron(cache));
                    o
                }
                LayerParams::Dense(w) => {
                    tag(ar, || format!("L{l}.fwd.matmul"));
                    let o = h.matmul_nt_with(w, ar)?;
                    caches.push(LayerCache::Dense(h));
                    o
                }
            };
            h = match layer.activation {
                Activation::Relu => {
                    tag(ar, || format!("L{l}.fwd.act"));
                    let mut act = out.clone();
                    for v in act.data_mut() {
                        *v = ar.relu(*v);
                    }
                    pres.push(Some(out));
                    act
                }
                Activation::Identity | Activation::SoftmaxOutput => {
                    pres.push(None);
                    out
                }
            };
        }
        Ok(NetCache {
            layers: caches,
            pre_activations: pres,
            output: h,
        })
    }

    /// Loss of the cached output against `targets`.
    pub fn loss_with<A: Arith>(
        &self,
        cache: &NetCache,
        targets: Targets<'_>,
        kind: LossKind,
        ar: &mut A,
    ) -> Result<LossEval> {
        let out = &cache.output;
        let (n, m) = out.shape();
        tag(ar, || "loss.fwd".to_string());
        match kind {
            LossKind::SquaredFrobenius => {
                let owned;
                let y = match targets {
                    Targets::Values(y) => y,
                    Targets::Labels(labels) => {
                        owned = one_hot(labels, m)?;
                        &owned
                    }
                };
                if y.shape() != out.shape() {
                    return Err(Error::shape(
                        "squared loss",
                        format!("{n}x{m} targets"),
                        format!("{}x{}", y.rows(), y.cols()),
                    ));
                }
                let mut residual = Matrix::zeros(n, m);
                for ((r, &o), &t) in residual.data_mut().iter_mut().zip(out.data()).zip(y.data()) {
                    *r = ar.sub(o, t);
                }
                let mut total = 0.0;
                for (k, &r) in residual.data().iter().enumerate() {
                    let sq = ar.mul(r, r);
                    total = if k == 0 { sq } else { ar.add(total, sq) };
                }
                Ok(LossEval {
                    value: total,
                    state: LossState::Squared { residual },
                })
            }
            LossKind::SoftmaxCrossEntropy => {
                let labels = match targets {
                    Targets::Labels(l) => l.to_vec(),
                    Targets::Values(y) => y.argmax_rows(),
                };
                if labels.len() != n {
                    return Err(Error::shape("cross-entropy", format!("{n} labels"), labels.len()));
                }
                if let Some(&bad) = labels.iter().find(|&&c| c >= m) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {m} outputs"
                    )));
                }
                let mut exps = Matrix::zeros(n, m);
                let mut sums = Vec::with_capacity(n);
                let mut total = 0.0;
                for i in 0..n {
                    let row = out.row(i);
                    let mut mx = row[0];
                    for &v in &row[1..] {
                        mx = ar.max(mx, v);
                    }
                    let mut shifted = vec![0.0; m];
                    for (s, &v) in shifted.iter_mut().zip(row) {
                        *s = ar.sub(v, mx);
                    }
                    let e_row = exps.row_mut(i);
                    for (e, &s) in e_row.iter_mut().zip(&shifted) {
                        *e = ar.exp(s);
                    }
                    let mut sum = e_row[0];
                    for &e in &e_row[1..] {
                        sum = ar.add(sum, e);
                    }
                    let log_z = ar.ln(sum);
                    let li = ar.sub(log_z, shifted[labels[i]]);
                    total = if i == 0 { li } else { ar.add(total, li) };
                    sums.push(sum);
                }
                let value = ar.div(total, n as f64);
                Ok(LossEval {
                    value,
                    state: LossState::Softmax { exps, sums, labels },
                })
            }
        }
    }

    fn loss_seed<A: Arith>(&self, eval: &LossEval, ar: &mut A) -> Matrix {
        tag(ar, || "loss.seed".to_string());
        match &eval.state {
            LossState::Squared { residual } => {
                let mut seed = residual.clone();
                for v in seed.data_mut() {
                    *v = ar.mul(2.0, *v);
                }
                seed
            }
            LossState::Softmax { exps, sums, labels } => {
                let (n, m) = exps.shape();
                let inv_n = ar.div(1.0, n as f64);
                let mut seed = Matrix::zeros(n, m);
                for i in 0..n {
                    let row = seed.row_mut(i);
                    for (d, &e) in row.iter_mut().zip(exps.row(i)) {
                        *d = ar.div(e, sums[i]);
                    }
                    row[labels[i]] = ar.sub(row[labels[i]], 1.0);
                    for d in row.iter_mut() {
                        *d = ar.mul(*d, inv_n);
                    }
                }
                seed
            }
        }
    }

    /// Backpropagates the loss seed through every layer.
    pub fn backward_with<A: Arith>(
        &self,
        cache: &NetCache,
        eval: &LossEval,
        input_grad: bool,
        ar: &mut A,
    ) -> Result<NetGradient> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "network backward",
                format!("{} layer caches", self.layers.len()),
                cache.layers.len(),
            ));
        }
        let mut d = self.loss_seed(eval, ar);
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(pre) = &cache.pre_activations[l] {
                tag(ar, || format!("L{l}.bwd.act"));
                for (g, &p) in d.data_mut().iter_mut().zip(pre.data()) {
                    *g = ar.gate(*g, p);
                }
            }
            let need_dx = l > 0 || input_grad;
            let (grad, dx) = match (&layer.params, &cache.layers[l]) {
                (LayerParams::Kron(f), LayerCache::Kron(c)) => {
                    let mut g = f.backward_with(c, &d, need_dx, ar, &format!("L{l}."))?;
                    let dx = g.dx.take();
                    (LayerGrad::Kron(g), dx)
                }
                (LayerParams::Dense(w), LayerCache::Dense(input)) => {
                    tag(ar, || format!("L{l}.bwd.dw"));
                    let dw = d.t_matmul_with(input, ar)?;
                    let dx = if need_dx {
                        tag(ar, || format!("L{l}.bwd.dx"));
                        Some(d.matmul_with(w, ar)?)
                    } else {
                        None
                    };
                    (LayerGrad::Dense { dw, dx: None }, dx)
                }
                _ => {
                    return Err(Error::shape(
                        "network backward",
                        "cache kinds matching layers",
                        format!("mismatch at layer {l}"),
                    ))
                }
            };
            grads.push(grad);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        grads.reverse();
        let input = if input_grad { Some(d) } else { None };
        Ok(NetGradient {
            layers: grads,
            loss: eval.value,
            input,
        })
    }

    /// Loss and gradients for one batch.
    pub fn gradient(
        &self,
        x: &Matrix,
        targets: Targets<'_>,
        kind: LossKind,
        input_grad: bool,
    ) -> Result<NetGradient> {
        let cache = self.forward(x)?;
        let eval = self.loss_with(&cache, targets, kind, &mut Plain)?;
        self.backward_with(&cache, &eval, input_grad, &mut Plain)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.output)
    }

    /// Per-sample loss and argmax accuracy against `labels`.
    pub fn evaluate(
        &self,
        x: &Matrix,
        targets: Targets<'_>,
        labels: &[usize],
        kind: LossKind,
    ) -> Result<Evaluation> {
        let cache = self.forward(x)?;
        let eval = self.loss_with(&cache, targets, kind, &mut Plain)?;
        let loss = match kind {
            LossKind::SquaredFrobenius => eval.value / x.rows() as f64,
            LossKind::SoftmaxCrossEntropy => eval.value,
        };
        Ok(Evaluation {
            loss,
            accuracy: accuracy(&cache.output, labels),
        })
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
