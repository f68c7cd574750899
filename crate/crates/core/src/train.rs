//! SGD trainers: the factored model with an L1 proximal step on every mask,
//! a group-lasso baseline on dense tiles, and an iterative block-magnitude
//! pruning baseline.

use serde::{Deserialize, Serialize};

use crate::arith::Arith;
use crate::blocks::tile_grid;
use crate::data::{batches, Batch, Dataset, OwnedTargets};
use crate::error::{Error, Result};
use crate::flops::network_flops;
use crate::matrix::Matrix;
use crate::network::{LayerParams, LossKind, NetGradient, Network};

/// Loss values above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the L1 penalty on the masks (or of the tile penalty for the
    /// group-lasso baseline).
    pub lambda: f64,
    /// Magnitudes below this count as zero when measuring sparsity.
    pub eps_zero: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lambda: 0.0,
            eps_zero: 1e-6,
            seed: 0,
            loss: LossKind::SoftmaxCrossEntropy,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("train.{field}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive finite number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be a finite number ≥ 0");
        }
        if self.eps_zero.is_nan() || self.eps_zero <= 0.0 {
            return bad("eps_zero", "must be positive");
        }
        Ok(())
    }
}

/// One epoch's snapshot. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub sparsity_rate: f64,
    pub trainable_params: usize,
    pub forward_flops: u64,
    pub backward_flops: u64,
}

impl MetricRecord {
    pub const COLUMNS: [&'static str; 8] = [
        "epoch",
        "train_loss",
        "eval_loss",
        "accuracy",
        "sparsity_rate",
        "trainable_params",
        "forward_flops",
        "backward_flops",
    ];
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub metrics: Vec<MetricRecord>,
}

/// Plain gradient step `p ← p − η g`, two flops per parameter. Used by the
/// flop counter; the trainers use [`Sgd`].
pub fn sgd_step_with<A: Arith>(net: &mut Network, grad: &NetGradient, lr: f64, ar: &mut A) {
    ar.label("update");
    for (p, g) in net.params_mut().into_iter().zip(grad.params()) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            let step = ar.mul(lr, d);
            *w = ar.sub(*w, step);
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        let velocity = net
            .params()
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Sgd {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, net: &mut Network, grad: &NetGradient) {
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, g), v) in net
            .params_mut()
            .into_iter()
            .zip(grad.params())
            .zip(self.velocity.iter_mut())
        {
            for ((w, &d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = mu * *vel + d;
                *w -= lr * *vel;
            }
        }
    }

    /// Velocity buffers in the network's canonical parameter order.
    pub fn velocity_mut(&mut self) -> &mut [Matrix] {
        &mut self.velocity
    }
}

/// `x ← sign(x)·max(|x| − t, 0)`. Results below the smallest normal float
/// are flushed to an exact zero.
pub fn soft_threshold(m: &mut Matrix, t: f64) {
    for x in m.data_mut() {
        let shrunk = x.abs() - t;
        *x = if shrunk >= f64::MIN_POSITIVE {
            shrunk.copysign(*x)
        } else {
            0.0
        };
    }
}

/// Block soft-threshold: each `m₂×n₂` tile `W_g ← W_g·max(1 − t/‖W_g‖, 0)`.
pub fn group_soft_threshold(w: &mut Matrix, m2: usize, n2: usize, t: f64) -> Result<()> {
    let (m1, n1) = tile_grid(w, m2, n2)?;
    let cols = w.cols();
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            let mut sq = 0.0;
            for i2 in 0..m2 {
                let row = (i1 * m2 + i2) * cols + j1 * n2;
                sq += w.data()[row..row + n2].iter().map(|x| x * x).sum::<f64>();
            }
            let norm = sq.sqrt();
            let factor = if norm > t { 1.0 - t / norm } else { 0.0 };
            for i2 in 0..m2 {
                let row = (i1 * m2 + i2) * cols + j1 * n2;
                for x in &mut w.data_mut()[row..row + n2] {
                    *x *= factor;
                    if x.abs() < f64::MIN_POSITIVE {
                        *x = 0.0;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fraction of zero tiles: mask entries of factored layers and, when
/// `blk` is given, `m₂×n₂` tiles of dense layers (Frobenius norm below
/// `eps`). Zero when nothing is measurable.
pub fn network_sparsity(net: &Network, blk: Option<(usize, usize)>, eps: f64) -> f64 {
    let mut zero = 0usize;
    let mut total = 0usize;
    for layer in net.layers() {
        match (&layer.params, blk) {
            (LayerParams::Kron(f), _) => {
                zero += f.s().data().iter().filter(|v| v.abs() < eps).count();
                total += f.s().len();
            }
            (LayerParams::Dense(w), Some((m2, n2))) => {
                if let Ok(norms) = crate::blocks::tile_sq_norms(w, m2, n2) {
                    zero += norms.data().iter().filter(|v| v.sqrt() < eps).count();
                    total += norms.len();
                }
            }
            (LayerParams::Dense(_), None) => {}
        }
    }
    if total == 0 {
        0.0
    } else {
        zero as f64 / total as f64
    }
}

/// Evaluates `net` on `eval` and fills a full record.
pub fn collect_metrics(
    net: &Network,
    epoch: usize,
    train_loss: f64,
    eval: &Dataset,
    cfg: &TrainConfig,
    blk: Option<(usize, usize)>,
) -> Result<MetricRecord> {
    let targets = eval.targets(cfg.loss)?;
    let ev = net.evaluate(&eval.x, targets.borrow(), &eval.eval_labels(), cfg.loss)?;
    let flops = network_flops(&net.specs(), cfg.batch_size, cfg.loss)?;
    Ok(MetricRecord {
        epoch,
        train_loss,
        eval_loss: ev.loss,
        accuracy: ev.accuracy,
        sparsity_rate: network_sparsity(net, blk, cfg.eps_zero),
        trainable_params: net.param_count(),
        forward_flops: flops.forward,
        backward_flops: flops.backward,
    })
}

/// Sample-weighted contribution of one batch loss to the epoch mean.
fn loss_weight(kind: LossKind, batch: usize) -> f64 {
    match kind {
        LossKind::SquaredFrobenius => 1.0,
        LossKind::SoftmaxCrossEntropy => batch as f64,
    }
}

/// Gradient of one mini-batch, with the divergence guard applied.
pub fn batch_gradient(
    net: &Network,
    batch: &Batch,
    loss: LossKind,
    epoch: usize,
) -> Result<NetGradient> {
    let grad = net.gradient(&batch.x, batch.targets.borrow(), loss, false)?;
    if !grad.loss.is_finite() || grad.loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            epoch,
            loss: grad.loss,
        });
    }
    Ok(grad)
}

/// What happens after each optimizer step.
pub(crate) enum Regularizer<'a> {
    /// Soft-threshold every mask by `η·λ`.
    MaskL1(f64),
    /// Block soft-threshold every dense layer by `η·λ`.
    Tiles { blk: (usize, usize), t: f64 },
    /// Keep pruned tiles at zero (weights and momentum).
    Frozen { blk: (usize, usize), masks: &'a [Matrix] },
    /// Soft-threshold the masks by `l1`, then shrink the concatenation of
    /// all masks as one group by `group`.
    SparseGroup { l1: f64, group: f64 },
}

/// Joint Frobenius norm of every mask in `net`.
pub fn mask_group_norm(net: &Network) -> f64 {
    net.layers()
        .iter()
        .filter_map(|l| match &l.params {
            LayerParams::Kron(f) => Some(f.s().sum_squares()),
            LayerParams::Dense(_) => None,
        })
        .sum::<f64>()
        .sqrt()
}

/// Sum of the masks' entry-wise L1 norms.
pub fn mask_l1_norm(net: &Network) -> f64 {
    net.layers()
        .iter()
        .filter_map(|l| match &l.params {
            LayerParams::Kron(f) => Some(f.s().l1_norm()),
            LayerParams::Dense(_) => None,
        })
        .sum()
}

fn apply_frozen(net: &mut Network, opt: &mut Sgd, blk: (usize, usize), masks: &[Matrix]) {
    let (m2, n2) = blk;
    let mut dense_ix = 0;
    let mut param_ix = 0;
    for layer in net.layers_mut() {
        match &mut layer.params {
            LayerParams::Dense(w) => {
                let mask = &masks[dense_ix];
                let vel = &mut opt.velocity_mut()[param_ix];
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        if mask[(i / m2, j / n2)] == 0.0 {
                            w[(i, j)] = 0.0;
                            vel[(i, j)] = 0.0;
                        }
                    }
                }
                dense_ix += 1;
                param_ix += 1;
            }
            LayerParams::Kron(f) => param_ix += f.params().len(),
        }
    }
}

fn regularize(net: &mut Network, opt: &mut Sgd, reg: &Regularizer<'_>) -> Result<()> {
    match *reg {
        Regularizer::MaskL1(t) => {
            if t > 0.0 {
                for layer in net.layers_mut() {
                    if let LayerParams::Kron(f) = &mut layer.params {
                        soft_threshold(f.s_mut(), t);
                    }
                }
            }
        }
        Regularizer::Tiles { blk, t } => {
            if t > 0.0 {
                for layer in net.layers_mut() {
                    if let LayerParams::Dense(w) = &mut layer.params {
                        group_soft_threshold(w, blk.0, blk.1, t)?;
                    }
                }
            }
        }
        Regularizer::Frozen { blk, masks } => apply_frozen(net, opt, blk, masks),
        Regularizer::SparseGroup { l1, group } => {
            regularize(net, opt, &Regularizer::MaskL1(l1))?;
            if group > 0.0 {
                let g = mask_group_norm(net);
                let factor = if g > group { 1.0 - group / g } else { 0.0 };
                for layer in net.layers_mut() {
                    if let LayerParams::Kron(f) = &mut layer.params {
                        for x in f.s_mut().data_mut() {
                            *x *= factor;
                            if x.abs() < f64::MIN_POSITIVE {
                                *x = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// One pass over `train`; returns the per-sample training loss.
pub(crate) fn run_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    train: &Dataset,
    targets: &OwnedTargets,
    cfg: &TrainConfig,
    epoch: usize,
    reg: &Regularizer<'_>,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches(train, targets, cfg.batch_size, cfg.shuffle, cfg.seed, epoch as u64) {
        let grad = batch_gradient(net, &batch, cfg.loss, epoch)?;
        total += grad.loss * loss_weight(cfg.loss, batch.indices.len());
        opt.step(net, &grad);
        regularize(net, opt, reg)?;
    }
    Ok(total / train.len() as f64)
}

struct Session<'a> {
    train: &'a Dataset,
    eval: &'a Dataset,
    cfg: &'a TrainConfig,
    targets: OwnedTargets,
    blk: Option<(usize, usize)>,
    metrics: Vec<MetricRecord>,
    epoch: usize,
}

impl<'a> Session<'a> {
    fn new(
        train: &'a Dataset,
        eval: &'a Dataset,
        cfg: &'a TrainConfig,
        blk: Option<(usize, usize)>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Session {
            train,
            eval,
            cfg,
            targets: train.targets(cfg.loss)?,
            blk,
            metrics: Vec::new(),
            epoch: 0,
        })
    }

    fn epochs(
        &mut self,
        net: &mut Network,
        opt: &mut Sgd,
        count: usize,
        reg: &Regularizer<'_>,
    ) -> Result<()> {
        for _ in 0..count {
            self.epoch += 1;
            let loss = run_epoch(net, opt, self.train, &self.targets, self.cfg, self.epoch, reg)?;
            let rec = collect_metrics(net, self.epoch, loss, self.eval, self.cfg, self.blk)?;
            if !rec.eval_loss.is_finite() || rec.eval_loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    loss: rec.eval_loss,
                });
            }
            self.metrics.push(rec);
        }
        Ok(())
    }
}

/// Trains every parameter with momentum SGD; after each step each mask is
/// soft-thresholded by `η·λ`.
pub fn train_kron(
    mut net: Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !net.has_kron() {
        return Err(Error::InvalidArgument(
            "train_kron needs at least one factored layer".into(),
        ));
    }
    let mut session = Session::new(train, eval, cfg, None)?;
    let mut opt = Sgd::new(&net, cfg.learning_rate, cfg.momentum);
    let reg = Regularizer::MaskL1(cfg.learning_rate * cfg.lambda);
    session.epochs(&mut net, &mut opt, cfg.epochs, &reg)?;
    Ok(TrainOutcome {
        net,
        metrics: session.metrics,
    })
}

fn check_dense_tiles(net: &Network, blk: (usize, usize), who: &str) -> Result<()> {
    for layer in net.layers() {
        match &layer.params {
            LayerParams::Dense(w) => {
                tile_grid(w, blk.0, blk.1)?;
            }
            LayerParams::Kron(_) => {
                return Err(Error::InvalidArgument(format!("{who} needs dense layers only")))
            }
        }
    }
    Ok(())
}

/// Dense baseline with a per-tile Frobenius penalty handled proximally.
pub fn train_group_lasso(
    mut net: Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    blk: (usize, usize),
) -> Result<TrainOutcome> {
    check_dense_tiles(&net, blk, "group lasso")?;
    let mut session = Session::new(train, eval, cfg, Some(blk))?;
    let mut opt = Sgd::new(&net, cfg.learning_rate, cfg.momentum);
    let reg = Regularizer::Tiles {
        blk,
        t: cfg.learning_rate * cfg.lambda,
    };
    session.epochs(&mut net, &mut opt, cfg.epochs, &reg)?;
    Ok(TrainOutcome {
        net,
        metrics: session.metrics,
    })
}

/// Number of tiles pruned after round `k` of `rounds`.
pub fn prune_quota(tiles: usize, target_rate: f64, k: usize, rounds: usize) -> usize {
    ((target_rate * tiles as f64 * k as f64 / rounds as f64).round() as usize).min(tiles)
}

/// Zeroes the lowest-norm live tiles until `quota` tiles are pruned in
/// total. Ties go to the earlier layer, then the earlier tile in row-major
/// order.
fn prune_to(net: &mut Network, masks: &mut [Matrix], blk: (usize, usize), quota: usize) -> Result<()> {
    let (m2, n2) = blk;
    let mut live: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut pruned = 0;
    let mut dense_ix = 0;
    for layer in net.layers() {
        if let LayerParams::Dense(w) = &layer.params {
            let norms = crate::blocks::tile_sq_norms(w, m2, n2)?;
            let mask = &masks[dense_ix];
            for i1 in 0..norms.rows() {
                for j1 in 0..norms.cols() {
                    if mask[(i1, j1)] == 0.0 {
                        pruned += 1;
                    } else {
                        live.push((norms[(i1, j1)], dense_ix, i1, j1));
                    }
                }
            }
            dense_ix += 1;
        }
    }
    live.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    for &(_, l, i1, j1) in live.iter().take(quota.saturating_sub(pruned)) {
        masks[l][(i1, j1)] = 0.0;
    }
    Ok(())
}

/// Iterative block-magnitude pruning: `rounds` times train for
/// `cfg.epochs` and prune up to the round's share of `target_rate`, then
/// fine-tune the survivors for `cfg.epochs`. The final zero-tile fraction
/// is `round(target_rate·T)/T` for `T` tiles.
pub fn prune_blocks(
    mut net: Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    blk: (usize, usize),
    target_rate: f64,
    rounds: usize,
) -> Result<TrainOutcome> {
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::InvalidArgument(format!(
            "target rate {target_rate} outside [0, 1)"
        )));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    check_dense_tiles(&net, blk, "block pruning")?;
    let mut masks: Vec<Matrix> = net
        .layers()
        .iter()
        .filter_map(|l| match &l.params {
            LayerParams::Dense(w) => {
                let (m1, n1) = tile_grid(w, blk.0, blk.1).expect("checked above");
                Some(Matrix::ones(m1, n1))
            }
            LayerParams::Kron(_) => None,
        })
        .collect();
    let tiles: usize = masks.iter().map(Matrix::len).sum();
    let mut session = Session::new(train, eval, cfg, Some(blk))?;
    let mut opt = Sgd::new(&net, cfg.learning_rate, cfg.momentum);
    for k in 1..=rounds {
        session.epochs(
            &mut net,
            &mut opt,
            cfg.epochs,
            &Regularizer::Frozen { blk, masks: &masks },
        )?;
        prune_to(&mut net, &mut masks, blk, prune_quota(tiles, target_rate, k, rounds))?;
        apply_frozen(&mut net, &mut opt, blk, &masks);
    }
    session.epochs(
        &mut net,
        &mut opt,
        cfg.epochs,
        &Regularizer::Frozen { blk, masks: &masks },
    )?;
    Ok(TrainOutcome {
        net,
        metrics: session.metrics,
    })
}
