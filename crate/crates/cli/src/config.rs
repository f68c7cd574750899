//! Run configuration. One JSON document drives every subcommand:
//!
//! ```json
//! {
//!   "dataset": { "kind": "teacher", "m": 16, "n": 32, "block": [2, 2],
//!                "zero_tile_fraction": 0.6, "samples": 1024,
//!                "eval_samples": 256, "seed": 7 },
//!   "model": { "layers": [ { "kind": "kron",
//!                            "shape": { "m1": 8, "n1": 16, "m2": 2, "n2": 2, "r": 4 },
//!                            "activation": "softmax-output" } ] },
//!   "train": { "epochs": 20, "learning_rate": 0.02, "lambda": 0.01 },
//!   "select": { "blocks": [[2, 2], [4, 4]], "rank": 4 },
//!   "prune": { "target_rate": 0.5, "rounds": 3 }
//! }
//! ```
//!
//! Unknown keys are rejected everywhere; omitted sections take the defaults
//! of the corresponding library config.

use std::path::{Path, PathBuf};

use kronsparse::data::{load_idx, read_dataset, Dataset, TeacherSpec};
use kronsparse::select::{PatternSet, SelectConfig};
use kronsparse::train::TrainConfig;
use kronsparse::{Activation, KronShape, LayerKind, LayerSpec, Matrix};
use serde::{Deserialize, Serialize};

/// Directory searched for MNIST files when `dataset.dir` is omitted.
pub const DATA_DIR_VAR: &str = "KRONSPARSE_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// A config problem, reported with the offending field.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {msg}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// The four standard MNIST IDX files in `dir` (or `$KRONSPARSE_DATA_DIR`).
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Use only the first `train_limit` training rows.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        eval_limit: Option<usize>,
    },
    /// Synthetic block-sparse teacher; the first `samples` rows train and
    /// the next `eval_samples` evaluate.
    Teacher {
        m: usize,
        n: usize,
        block: (usize, usize),
        zero_tile_fraction: f64,
        samples: usize,
        eval_samples: usize,
        #[serde(default)]
        noise: f64,
        seed: u64,
    },
    /// Datasets previously written by `export-teacher`.
    Idx {
        dir: PathBuf,
        #[serde(default = "default_train_prefix")]
        train_prefix: String,
        #[serde(default = "default_eval_prefix")]
        eval_prefix: String,
    },
}

fn default_train_prefix() -> String {
    "train".into()
}

fn default_eval_prefix() -> String {
    "eval".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
}

/// Pattern-selection settings. The optimizer comes from the top-level
/// `train` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Candidate tile sizes, one pattern each.
    pub blocks: Vec<(usize, usize)>,
    pub rank: usize,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub lambda_increment: f64,
    pub increment_period: usize,
    pub max_epochs: usize,
    pub eps_group_rel: f64,
    pub finetune_epochs: usize,
    pub finetune_keep_l1: bool,
    pub parallel: bool,
}

impl Default for SelectSection {
    fn default() -> Self {
        let d = SelectConfig::default();
        SelectSection {
            blocks: Vec::new(),
            rank: 1,
            lambda1_init: d.lambda1_init,
            lambda2_init: d.lambda2_init,
            lambda_increment: d.lambda_increment,
            increment_period: d.increment_period,
            max_epochs: d.max_epochs,
            eps_group_rel: d.eps_group_rel,
            finetune_epochs: d.finetune_epochs,
            finetune_keep_l1: d.finetune_keep_l1,
            parallel: d.parallel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub target_rate: f64,
    pub rounds: usize,
    /// Tile size; defaults to that of the first factored layer.
    #[serde(default)]
    pub block: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Tile size of the group-lasso penalty; defaults to that of the first
    /// factored layer.
    #[serde(default)]
    pub block: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub select: Option<SelectSection>,
    #[serde(default)]
    pub prune: Option<PruneSection>,
    #[serde(default)]
    pub baseline: BaselineSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(&path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| invalid("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.layers.is_empty() {
            return Err(invalid("model.layers", "at least one layer is required"));
        }
        for (l, spec) in self.model.layers.iter().enumerate() {
            if let LayerKind::Kron { shape: s } = spec.kind {
                KronShape::new(s.m1, s.n1, s.m2, s.n2, s.r).map_err(|e| invalid(&format!("model.layers[{l}].shape"), e))?;
            }
        }
        kronsparse::network::validate_specs(&self.model.layers).map_err(|e| invalid("model.layers", e))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        if let Some(DatasetConfig::Teacher { samples, eval_samples, .. }) = &self.dataset {
            if *samples == 0 || *eval_samples == 0 {
                return Err(invalid("dataset", "samples and eval_samples must be positive"));
            }
        }
        if let Some(p) = &self.prune {
            if !(0.0..1.0).contains(&p.target_rate) {
                return Err(invalid("prune.target_rate", "must lie in [0, 1)"));
            }
            if p.rounds == 0 {
                return Err(invalid("prune.rounds", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.model.layers
    }

    /// Dense layers of the same widths and activations.
    pub fn dense_specs(&self) -> Vec<LayerSpec> {
        self.specs()
            .iter()
            .map(|s| LayerSpec {
                kind: LayerKind::Dense {
                    m: s.kind.out_dim(),
                    n: s.kind.in_dim(),
                },
                activation: s.activation,
            })
            .collect()
    }

    /// Tile size of the first factored layer.
    pub fn model_block(&self) -> Option<(usize, usize)> {
        self.specs().iter().find_map(|s| match s.kind {
            LayerKind::Kron { shape } => Some(shape.block()),
            LayerKind::Dense { .. } => None,
        })
    }

    pub fn block_for(&self, explicit: Option<(usize, usize)>, field: &str) -> Result<(usize, usize), ConfigError> {
        explicit
            .or_else(|| self.model_block())
            .ok_or_else(|| invalid(field, "no tile size given and the model has no factored layer to take it from"))
    }

    pub fn select_config(&self) -> Result<SelectConfig, ConfigError> {
        let sec = self.select.as_ref().ok_or_else(|| invalid("select", "section is required"))?;
        let s = sec;
        let cfg = SelectConfig {
            lambda1_init: s.lambda1_init,
            lambda2_init: s.lambda2_init,
            lambda_increment: s.lambda_increment,
            increment_period: s.increment_period,
            max_epochs: s.max_epochs,
            eps_group_rel: s.eps_group_rel,
            finetune_epochs: s.finetune_epochs,
            finetune_keep_l1: s.finetune_keep_l1,
            parallel: s.parallel,
            train: self.train.clone(),
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// One candidate network per `select.blocks` entry; every layer of the
    /// model is refactored with that tile size.
    pub fn pattern_set(&self) -> Result<PatternSet, ConfigError> {
        let sec = self.select.as_ref().ok_or_else(|| invalid("select", "section is required"))?;
        if sec.blocks.len() < 2 {
            return Err(invalid("select.blocks", format!("need at least 2 candidate patterns, got {}", sec.blocks.len())));
        }
        let layers: Vec<(usize, usize, Activation)> = self
            .specs()
            .iter()
            .map(|s| (s.kind.out_dim(), s.kind.in_dim(), s.activation))
            .collect();
        PatternSet::from_blocks(&layers, &sec.blocks, sec.rank, self.train.seed).map_err(|e| invalid("select", e))
    }

    /// Loads or generates the (train, eval) pair.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let ds = self.dataset.as_ref().ok_or_else(|| invalid("dataset", "section is required"))?;
        let (train, eval) = match ds {
            DatasetConfig::Mnist { dir, train_limit, eval_limit } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_VAR)
                        .map(PathBuf::from)
                        .ok_or_else(|| invalid("dataset.dir", format!("not set and ${DATA_DIR_VAR} is unset")))?,
                };
                for f in MNIST_FILES {
                    if !dir.join(f).is_file() {
                        return Err(invalid("dataset.dir", format!("{} not found", dir.join(f).display())));
                    }
                }
                let load = |i: usize| {
                    load_idx(&dir.join(MNIST_FILES[i]), &dir.join(MNIST_FILES[i + 1])).map_err(|e| invalid("dataset", e))
                };
                let limit = |d: Dataset, n: Option<usize>| match n {
                    Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
                    _ => d,
                };
                (limit(load(0)?, *train_limit), limit(load(2)?, *eval_limit))
            }
            DatasetConfig::Teacher { .. } => {
                let (train, eval, _) = teacher_parts(self)?;
                (train, eval)
            }
            DatasetConfig::Idx { dir, train_prefix, eval_prefix } => (
                read_dataset(dir, train_prefix).map_err(|e| invalid("dataset", e))?,
                read_dataset(dir, eval_prefix).map_err(|e| invalid("dataset", e))?,
            ),
        };
        let want = self.specs()[0].kind.in_dim();
        if train.features() != want || eval.features() != want {
            return Err(invalid(
                "model.layers[0]",
                format!("input width {want} does not match the dataset's {} features", train.features()),
            ));
        }
        Ok((train, eval))
    }

    /// Teacher generator covering train and eval rows, and the eval count.
    pub fn teacher_spec(&self) -> Option<(TeacherSpec, usize)> {
        match self.dataset.as_ref()? {
            &DatasetConfig::Teacher {
                m,
                n,
                block,
                zero_tile_fraction,
                samples,
                eval_samples,
                noise,
                seed,
            } => Some((
                TeacherSpec {
                    m,
                    n,
                    block,
                    zero_tile_fraction,
                    samples: samples + eval_samples,
                    noise,
                    seed,
                },
                eval_samples,
            )),
            _ => None,
        }
    }
}

/// Generates the teacher task of `cfg` and returns `(train, eval, W*)`.
pub fn teacher_parts(cfg: &RunConfig) -> Result<(Dataset, Dataset, Matrix), ConfigError> {
    let (spec, eval_samples) = cfg
        .teacher_spec()
        .ok_or_else(|| invalid("dataset.kind", "must be \"teacher\""))?;
    let (all, w) = spec.generate().map_err(|e| invalid("dataset", e))?;
    let (train, eval) = all.split(spec.samples - eval_samples).map_err(|e| invalid("dataset", e))?;
    Ok((train, eval, w))
}
