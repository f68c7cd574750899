//! One-shot pattern selection: `K` candidate factorizations of the same
//! architecture are trained side by side, each with its own loss, under a
//! per-pattern group penalty on all of its masks plus an L1 penalty. Both
//! weights grow on a fixed schedule until a single pattern keeps a nonzero
//! mask; that pattern is then fine-tuned.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kron::{count_params, KronShape};
use crate::network::{Activation, LayerKind, LayerParams, LayerSpec, Network};
use crate::train::{
    mask_group_norm, mask_l1_norm, run_epoch, train_kron, Regularizer, Sgd, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub lambda_increment: f64,
    pub increment_period: usize,
    pub max_epochs: usize,
    /// Winner threshold as a fraction of each pattern's initial group norm.
    pub eps_group_rel: f64,
    pub finetune_epochs: usize,
    /// Keep the L1 term (at its final weight) while fine-tuning.
    pub finetune_keep_l1: bool,
    /// Run the patterns of each epoch on separate threads. Results are
    /// identical either way.
    pub parallel: bool,
    /// Optimizer, batching and loss settings; `epochs` and `lambda` are not
    /// used here.
    pub train: TrainConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            lambda1_init: 0.01,
            lambda2_init: 0.01,
            lambda_increment: 0.002,
            increment_period: 5,
            max_epochs: 50,
            eps_group_rel: 1e-3,
            finetune_epochs: 5,
            finetune_keep_l1: true,
            parallel: false,
            train: TrainConfig::default(),
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("select.{field}: {why}")));
        for (name, v) in [("lambda1_init", self.lambda1_init), ("lambda2_init", self.lambda2_init)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be a finite number ≥ 0");
            }
        }
        if !(self.lambda_increment >= 0.0 && self.lambda_increment.is_finite()) {
            return bad("lambda_increment", "must be a finite number ≥ 0");
        }
        if self.increment_period == 0 {
            return bad("increment_period", "must be at least 1");
        }
        if self.max_epochs < self.increment_period {
            return bad("max_epochs", "must be at least increment_period");
        }
        if !(self.eps_group_rel > 0.0 && self.eps_group_rel < 1.0) {
            return bad("eps_group_rel", "must lie in (0, 1)");
        }
        let train = TrainConfig {
            epochs: self.max_epochs,
            ..self.train.clone()
        };
        train.validate()
    }

    /// `(λ₁, λ₂)` in force during 1-based `epoch`.
    pub fn lambdas(&self, epoch: usize) -> (f64, f64) {
        let steps = (epoch.saturating_sub(1) / self.increment_period) as f64;
        (
            self.lambda1_init + steps * self.lambda_increment,
            self.lambda2_init + steps * self.lambda_increment,
        )
    }
}

/// Candidate networks, one per pattern. Each pattern lists the shape of
/// every factored layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub patterns: Vec<Vec<KronShape>>,
    pub nets: Vec<Network>,
}

fn kron_shapes(net: &Network) -> Vec<KronShape> {
    net.layers()
        .iter()
        .filter_map(|l| match &l.params {
            LayerParams::Kron(f) => Some(*f.shape()),
            LayerParams::Dense(_) => None,
        })
        .collect()
}

impl PatternSet {
    pub fn new(nets: Vec<Network>) -> Result<Self> {
        if nets.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "pattern selection needs at least 2 patterns, got {}",
                nets.len()
            )));
        }
        let (n0, m0) = (nets[0].in_dim(), nets[0].out_dim());
        for (k, net) in nets.iter().enumerate() {
            if !net.has_kron() {
                return Err(Error::InvalidArgument(format!("pattern {k} has no factored layer")));
            }
            if (net.in_dim(), net.out_dim()) != (n0, m0) {
                return Err(Error::InvalidArgument(format!(
                    "pattern {k} maps {} -> {}, expected {n0} -> {m0}",
                    net.in_dim(),
                    net.out_dim()
                )));
            }
        }
        let patterns = nets.iter().map(kron_shapes).collect();
        Ok(PatternSet { patterns, nets })
    }

    /// Builds one network per tile size for a stack of layers given as
    /// `(m, n, activation)`. Every layer of pattern `k` uses tiles
    /// `blocks[k]` at rank `rank`; pattern `k` is initialised from stream
    /// `k` of `seed`.
    pub fn from_blocks(
        layers: &[(usize, usize, Activation)],
        blocks: &[(usize, usize)],
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut nets = Vec::with_capacity(blocks.len());
        for (k, &(m2, n2)) in blocks.iter().enumerate() {
            let specs = layers
                .iter()
                .map(|&(m, n, activation)| {
                    if m2 == 0 || n2 == 0 || m % m2 != 0 || n % n2 != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "pattern {k}: block {m2}x{n2} does not tile a {m}x{n} layer"
                        )));
                    }
                    Ok(LayerSpec {
                        kind: LayerKind::Kron {
                            shape: KronShape::new(m / m2, n / n2, m2, n2, rank)?,
                        },
                        activation,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            nets.push(Network::init(&specs, &mut rng)?);
        }
        PatternSet::new(nets)
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }
}

/// `Σₖ Σₗ count_params(pattern k, layer l)`.
pub fn selection_param_count(patterns: &[Vec<KronShape>]) -> usize {
    patterns.iter().flatten().map(count_params).sum()
}

/// Per-epoch, per-pattern trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub epoch: usize,
    pub k: usize,
    pub group_norm: f64,
    pub l1_norm: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub winner: usize,
    pub winner_shapes: Vec<KronShape>,
    /// Epoch at which selection stopped.
    pub stop_epoch: usize,
    /// Whether a unique survivor appeared before `max_epochs`.
    pub converged: bool,
    pub final_lambdas: (f64, f64),
    /// Winner thresholds `ε_k` per pattern.
    pub eps_group: Vec<f64>,
    /// Group norms at the stop epoch.
    pub final_group_norms: Vec<f64>,
    pub records: Vec<GroupRecord>,
    pub finetuned: TrainOutcome,
}

struct Candidate {
    net: Network,
    opt: Sgd,
}

fn epoch_for(
    c: &mut Candidate,
    train: &Dataset,
    targets: &crate::data::OwnedTargets,
    cfg: &TrainConfig,
    epoch: usize,
    reg: &Regularizer<'_>,
) -> Result<f64> {
    run_epoch(&mut c.net, &mut c.opt, train, targets, cfg, epoch, reg)
}

/// Runs the selection and fine-tunes the winner.
pub fn select_pattern(
    set: PatternSet,
    train: &Dataset,
    eval: &Dataset,
    cfg: &SelectConfig,
) -> Result<SelectOutcome> {
    cfg.validate()?;
    let set = PatternSet::new(set.nets)?;
    let tcfg = &cfg.train;
    let targets = train.targets(tcfg.loss)?;
    let eps_group: Vec<f64> = set
        .nets
        .iter()
        .map(|n| cfg.eps_group_rel * mask_group_norm(n))
        .collect();
    let mut cands: Vec<Candidate> = set
        .nets
        .into_iter()
        .map(|net| Candidate {
            opt: Sgd::new(&net, tcfg.learning_rate, tcfg.momentum),
            net,
        })
        .collect();

    let mut records = Vec::new();
    let mut winner = None;
    let mut stop_epoch = cfg.max_epochs;
    let mut lambdas = cfg.lambdas(1);
    for epoch in 1..=cfg.max_epochs {
        lambdas = cfg.lambdas(epoch);
        let reg = Regularizer::SparseGroup {
            l1: tcfg.learning_rate * lambdas.1,
            group: tcfg.learning_rate * lambdas.0,
        };
        let losses: Vec<Result<f64>> = if cfg.parallel {
            thread::scope(|s| {
                let handles: Vec<_> = cands
                    .iter_mut()
                    .map(|c| {
                        let (targets, reg) = (&targets, &reg);
                        s.spawn(move || epoch_for(c, train, targets, tcfg, epoch, reg))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("pattern worker panicked"))
                    .collect()
            })
        } else {
            cands
                .iter_mut()
                .map(|c| epoch_for(c, train, &targets, tcfg, epoch, &reg))
                .collect()
        };
        let mut survivors = Vec::new();
        for (k, (c, loss)) in cands.iter().zip(losses).enumerate() {
            let g = mask_group_norm(&c.net);
            records.push(GroupRecord {
                epoch,
                k,
                group_norm: g,
                l1_norm: mask_l1_norm(&c.net),
                train_loss: loss?,
            });
            if g > eps_group[k] {
                survivors.push(k);
            }
        }
        match survivors.as_slice() {
            [] => return Err(Error::OverRegularized { epoch }),
            [k] => {
                winner = Some(*k);
                stop_epoch = epoch;
                break;
            }
            _ => {}
        }
    }
    let converged = winner.is_some();
    let final_group_norms: Vec<f64> = cands.iter().map(|c| mask_group_norm(&c.net)).collect();
    let winner = winner.unwrap_or_else(|| {
        let mut best = 0;
        for (k, &g) in final_group_norms.iter().enumerate() {
            if g > final_group_norms[best] {
                best = k;
            }
        }
        best
    });

    let net = cands.swap_remove(winner).net;
    let winner_shapes = kron_shapes(&net);
    let ft_cfg = TrainConfig {
        epochs: cfg.finetune_epochs.max(1),
        lambda: if cfg.finetune_keep_l1 { lambdas.1 } else { 0.0 },
        ..tcfg.clone()
    };
    let finetuned = if cfg.finetune_epochs == 0 {
        TrainOutcome {
            net,
            metrics: Vec::new(),
        }
    } else {
        train_kron(net, train, eval, &ft_cfg)?
    };
    Ok(SelectOutcome {
        winner,
        winner_shapes,
        stop_epoch,
        converged,
        final_lambdas: lambdas,
        eps_group,
        final_group_norms,
        records,
        finetuned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_schedule_steps_every_period() {
        let cfg = SelectConfig::default();
        assert_eq!(cfg.lambdas(1), (0.01, 0.01));
        assert_eq!(cfg.lambdas(5), (0.01, 0.01));
        let (l1, l2) = cfg.lambdas(6);
        assert!((l1 - 0.012).abs() < 1e-15 && (l2 - 0.012).abs() < 1e-15);
    }

    #[test]
    fn single_pattern_rejected() {
        let set = PatternSet::from_blocks(&[(4, 4, Activation::Identity)], &[(2, 2)], 1, 0);
        assert!(matches!(set, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn param_count_of_identical_patterns_scales() {
        let s = KronShape::new(2, 8, 4, 32, 4).unwrap();
        assert_eq!(selection_param_count(&[vec![s]]), count_params(&s));
        assert_eq!(selection_param_count(&[vec![s], vec![s], vec![s]]), 3 * count_params(&s));
    }
}
