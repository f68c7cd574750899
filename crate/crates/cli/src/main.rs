mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use kronsparse::flops::{compare, network_flops, two_layer_flops, TwoLayer};
use kronsparse::kron::reconstruct_from_blockwise;
use kronsparse::shape::{objective_lower_bound, optimal_shape, shape_report};
use kronsparse::train::{prune_blocks, train_group_lasso, train_kron};
use kronsparse::{io, LayerKind, LossKind, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::{teacher_parts, ConfigError, RunConfig};
use output::RunDir;

#[derive(Parser)]
#[command(name = "kronsparse", version, about = "Block-sparse training with masked Kronecker factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Factored layers with an L1 penalty on the masks.
    Kron,
    /// Dense layers with a tile-wise group-lasso penalty.
    GroupLasso,
    /// Dense layers with iterative tile-magnitude pruning.
    Prune,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Kron => "kron",
            Method::GroupLasso => "group-lasso",
            Method::Prune => "prune",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint and summary to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "kron")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pick a tile size among select.blocks in one joint training run.
    SelectPattern {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the candidate patterns on separate threads (same results).
        #[arg(long)]
        parallel: bool,
    },
    /// Tabulate factorization shapes of an m×n layer.
    ShapeOpt {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        /// Comma-separated ranks for the parameter/FLOP table.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        r_grid: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and instrumented FLOP counts of one training step.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.batch_size.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Factor a block-sparse matrix exactly, one term per nonzero tile.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        /// Tile size as m2xn2, e.g. 2x4.
        #[arg(long, value_parser = parse_block)]
        block: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the teacher dataset of a config as IDX files plus the teacher
    /// weight.
    ExportTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_block(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected m2xn2, got `{s}`"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let (m2, n2) = (parse(a)?, parse(b)?);
    if m2 == 0 || n2 == 0 {
        return Err("tile sides must be positive".into());
    }
    Ok((m2, n2))
}

/// Exit code 1 for bad input, 2 for failures while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.0)
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn cmd_train(config: PathBuf, method: Method, out: PathBuf, seed: Option<u64>) -> CmdResult {
    let cfg = load(&config, seed)?;
    let (train, eval) = cfg.datasets()?;
    let (specs, blk) = match method {
        Method::Kron => {
            if !cfg.specs().iter().any(|s| matches!(s.kind, LayerKind::Kron { .. })) {
                return Err(invalid("model.layers: method kron needs at least one factored layer"));
            }
            (cfg.specs().to_vec(), None)
        }
        Method::GroupLasso => (cfg.dense_specs(), Some(cfg.block_for(cfg.baseline.block, "baseline.block")?)),
        Method::Prune => {
            let p = cfg.prune.as_ref().ok_or_else(|| invalid("prune: section is required for --method prune"))?;
            (cfg.dense_specs(), Some(cfg.block_for(p.block, "prune.block")?))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let net = Network::init(&specs, &mut rng).map_err(invalid)?;
    let run = RunDir::create(&out).map_err(runtime)?;
    run.write_json("config.json", &cfg).map_err(runtime)?;

    let start = Instant::now();
    let outcome = match method {
        Method::Kron => train_kron(net, &train, &eval, &cfg.train),
        Method::GroupLasso => train_group_lasso(net, &train, &eval, &cfg.train, blk.expect("tile size")),
        Method::Prune => {
            let p = cfg.prune.as_ref().expect("checked above");
            prune_blocks(net, &train, &eval, &cfg.train, blk.expect("tile size"), p.target_rate, p.rounds)
        }
    };
    let outcome = outcome.map_err(|e| match e {
        kronsparse::Error::InvalidArgument(msg) => Failure::Invalid(msg),
        e => runtime(e),
    })?;
    let elapsed = start.elapsed();

    run.write_metrics(&outcome.metrics).map_err(runtime)?;
    run.write_checkpoint(&outcome.net).map_err(runtime)?;
    let last = outcome.metrics.last().ok_or_else(|| runtime("training produced no metrics"))?;
    let specs = outcome.net.specs();
    let batch_flops = network_flops(&specs, cfg.train.batch_size, cfg.train.loss).map_err(runtime)?;
    let sample_flops = network_flops(&specs, 1, cfg.train.loss).map_err(runtime)?;
    let summary = json!({
        "method": method.name(),
        "epochs": last.epoch,
        "accuracy": last.accuracy,
        "eval_loss": last.eval_loss,
        "train_loss": last.train_loss,
        "sparsity_rate": last.sparsity_rate,
        "trainable_params": last.trainable_params,
        "tile": blk.or(cfg.model_block()),
        "flops_per_batch": batch_flops,
        "flops_per_sample": sample_flops,
    });
    run.write_json("summary.json", &summary).map_err(runtime)?;
    run.write_timing(elapsed).map_err(runtime)?;
    print_json(&summary);
    Ok(())
}

fn cmd_select(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, parallel: bool) -> CmdResult {
    let mut cfg = load(&config, seed)?;
    if parallel {
        if let Some(s) = cfg.select.as_mut() {
            s.parallel = true;
        }
    }
    let scfg = cfg.select_config()?;
    let set = cfg.pattern_set()?;
    let (train, eval) = cfg.datasets()?;
    let run = out.as_deref().map(RunDir::create).transpose().map_err(runtime)?;
    if let Some(run) = &run {
        run.write_json("config.json", &cfg).map_err(runtime)?;
    }
    let start = Instant::now();
    let outcome = kronsparse::select::select_pattern(set, &train, &eval, &scfg).map_err(runtime)?;
    let elapsed = start.elapsed();
    let blocks = &cfg.select.as_ref().expect("validated").blocks;
    let last = outcome.finetuned.metrics.last();
    let summary = json!({
        "winner": outcome.winner,
        "winner_block": blocks[outcome.winner],
        "winner_shapes": outcome.winner_shapes,
        "converged": outcome.converged,
        "stop_epoch": outcome.stop_epoch,
        "final_lambdas": outcome.final_lambdas,
        "eps_group": outcome.eps_group,
        "final_group_norms": outcome.final_group_norms,
        "finetuned_accuracy": last.map(|m| m.accuracy),
        "finetuned_sparsity_rate": last.map(|m| m.sparsity_rate),
        "finetuned_trainable_params": last.map(|m| m.trainable_params),
    });
    if let Some(run) = &run {
        run.write_lines("group_norms.jsonl", &outcome.records).map_err(runtime)?;
        run.write_metrics(&outcome.finetuned.metrics).map_err(runtime)?;
        run.write_checkpoint(&outcome.finetuned.net).map_err(runtime)?;
        run.write_json("summary.json", &summary).map_err(runtime)?;
        run.write_timing(elapsed).map_err(runtime)?;
    }
    print_json(&summary);
    Ok(())
}

fn cmd_shape_opt(m: usize, n: usize, r_grid: Vec<usize>, batch: usize, as_json: bool) -> CmdResult {
    let sol = optimal_shape(m, n).map_err(invalid)?;
    let rows = shape_report(m, n, &r_grid, batch).map_err(invalid)?;
    if as_json {
        print_json(&json!({
            "m": m,
            "n": n,
            "best": sol.best,
            "optimal": sol.optimal,
            "lower_bound": objective_lower_bound(m, n),
            "rows": rows,
        }));
        return Ok(());
    }
    let b = sol.best;
    println!(
        "optimum for {m}x{n}: (m1,n1,m2,n2) = ({},{},{},{}), objective {} (bound {:.2}, {} optimal shape(s))",
        b.m1,
        b.n1,
        b.m2,
        b.n2,
        b.objective,
        objective_lower_bound(m, n),
        sol.optimal.len()
    );
    println!(
        "{:>6} {:>6} {:>6} {:>6} {:>4} {:>10} {:>8} {:>14}",
        "m1", "n1", "m2", "n2", "r", "params", "ceiling", "train_flops"
    );
    for r in &rows {
        println!(
            "{:>6} {:>6} {:>6} {:>6} {:>4} {:>10} {:>8} {:>14}{}",
            r.m1,
            r.n1,
            r.m2,
            r.n2,
            r.r,
            r.params,
            r.rank_ceiling,
            r.training_flops,
            if r.exceeds_ceiling { "  (r above ceiling)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_flops(config: PathBuf, batch: Option<usize>, seed: Option<u64>) -> CmdResult {
    let cfg = load(&config, seed)?;
    let batch = batch.unwrap_or(cfg.train.batch_size);
    if batch == 0 {
        return Err(invalid("--batch: must be positive"));
    }
    let cmp = compare(cfg.specs(), batch, cfg.train.loss, cfg.train.seed).map_err(runtime)?;
    let mut report = json!({
        "batch": batch,
        "analytic": cmp.analytic,
        "instrumented": cmp.instrumented,
        "equal": cmp.equal,
    });
    // Two factored layers (relu, then identity) under the squared loss form
    // the two-layer regression model; report its per-rank constants too.
    if let [a, b] = cfg.specs() {
        if let (LayerKind::Kron { shape: first }, LayerKind::Kron { shape: second }) = (a.kind, b.kind) {
            let model = TwoLayer::Kron { first, second };
            if model.specs() == cfg.specs() && cfg.train.loss == LossKind::SquaredFrobenius {
                let two = two_layer_flops(batch, &model).map_err(runtime)?;
                report["two_layer_constants"] = json!(two.constants);
            }
        }
    }
    print_json(&report);
    if cmp.equal {
        Ok(())
    } else {
        Err(runtime("analytic and instrumented counts differ"))
    }
}

fn cmd_decompose(input: PathBuf, block: (usize, usize), out: PathBuf) -> CmdResult {
    let w = io::load_matrix(&input).map_err(invalid)?;
    let (m2, n2) = block;
    let f = reconstruct_from_blockwise(&w, m2, n2).map_err(invalid)?;
    let err = f.materialize().max_abs_diff(&w);
    io::save_factor(&out, &f).map_err(runtime)?;
    let s = f.shape();
    print_json(&json!({
        "shape": s,
        "tiles": s.m1 * s.n1,
        "rank": s.r,
        "params": f.param_count(),
        "max_error": err,
    }));
    if err == 0.0 {
        Ok(())
    } else {
        Err(runtime(format!("round trip is not exact: max error {err:e}")))
    }
}

fn cmd_export_teacher(config: PathBuf, out: PathBuf) -> CmdResult {
    let cfg = load(&config, None)?;
    let (train, eval, w) = teacher_parts(&cfg)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;
    kronsparse::data::write_dataset(&train, &out, "train").map_err(runtime)?;
    kronsparse::data::write_dataset(&eval, &out, "eval").map_err(runtime)?;
    io::save_matrix(&out.join("teacher.kmat"), &w).map_err(runtime)?;
    print_json(&json!({
        "train_rows": train.len(),
        "eval_rows": eval.len(),
        "features": train.features(),
        "classes": train.class_count,
        "dir": out,
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, method, out, seed } => cmd_train(config, method, out, seed),
        Command::SelectPattern { config, out, seed, parallel } => cmd_select(config, out, seed, parallel),
        Command::ShapeOpt { m, n, r_grid, batch, json } => cmd_shape_opt(m, n, r_grid, batch, json),
        Command::Flops { config, batch, seed } => cmd_flops(config, batch, seed),
        Command::Decompose { input, block, out } => cmd_decompose(input, block, out),
        Command::ExportTeacher { config, out } => cmd_export_teacher(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
