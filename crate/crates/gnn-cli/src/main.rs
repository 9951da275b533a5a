//! Command-line front end for the `gnn` library.
//!
//! Three subcommands:
//! - `gnn train`: synthetic-dataset training run, metrics as CSV;
//! - `gnn bench`: fused vs two-step message passing timings as CSV;
//! - `gnn gradcheck`: finite-difference gradient audit per layer kind.
//!
//! Exit codes: 0 success, 1 numerical or validation failure, 2 usage
//! error. All value columns are deterministic given `--seed`; wall-time
//! columns necessarily vary between runs.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;

use gnn::check::{gradcheck, GradCheckConfig};
use gnn::io::{load_checkpoint, save_checkpoint};
use gnn::mp::{propagate, Aggregation, MessageFunction, PathChoice};
use gnn::nn::parse_model;
use gnn::train::{fit, make_synthetic_dataset, EpochMetric, TrainConfig, DEFAULT_MODEL};
use gnn::{GnnError, GnnGraph, Tape, Tensor};

const EXIT_OK: i32 = 0;
/// Numerical or validation failure.
const EXIT_FAIL: i32 = 1;
/// Bad flag value; clap reports flag parse failures with the same code.
const EXIT_USAGE: i32 = 2;

/// Set to `1` to corrupt one analytic gradient per comparison, proving
/// the gradcheck harness rejects a wrong backward rule.
const SABOTAGE_ENV: &str = "GNN_GRADCHECK_SABOTAGE";

#[derive(Parser)]
#[command(
    name = "gnn",
    version,
    about = "Deep learning on graphs at desk scale: train, benchmark, and audit gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a synthetic teacher dataset and emit per-epoch CSV
    Train(TrainArgs),
    /// Time fused against two-step neighbor aggregation over a size grid
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients for every layer kind
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Graphs in the synthetic dataset
    #[arg(long, default_value_t = 128)]
    num_graphs: usize,
    /// Nodes per graph
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    /// Directed edges per graph
    #[arg(long, default_value_t = 30)]
    edges: usize,
    /// Node feature width
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Graphs per minibatch
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Training epochs; 0 emits the CSV header only
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Seed for dataset, weights, and shuffling
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model description, e.g. "gcn:16-64:relu, pool:mean, dense:64-1"
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    /// Write the metrics CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Load weights from this file when it exists; save them back after
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Draw targets as pure noise, independent of the node features
    #[arg(long = "paper-random-y")]
    random_y: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Node counts for the benchmark grid (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    nodes: Vec<usize>,
    /// Edge counts for the benchmark grid (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "500,5000")]
    edges: Vec<usize>,
    /// Feature widths for the benchmark grid (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    feature_dim: Vec<usize>,
    /// Timed repetitions per grid point
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Untimed repetitions before measuring
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Seed for graph and feature generation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; grid points are independent, rows stay in order
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one layer kind, e.g. "graphconv"
    #[arg(long)]
    layer: Option<String>,
    /// Seed for the randomized instances
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    std::process::exit(code);
}

fn usage_error(cmd: &str, msg: &str) -> i32 {
    eprintln!("error: {msg}");
    eprintln!("Run `gnn {cmd} --help` for usage.");
    EXIT_USAGE
}

fn fail(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_FAIL
}

/// Prints to stdout, or writes the file when `--out` was given.
fn write_output(path: Option<&Path>, text: &str) -> Result<(), String> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ── train ───────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> i32 {
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        num_graphs: args.num_graphs,
        nodes: args.nodes,
        edges: args.edges,
        feature_dim: args.feature_dim,
        seed: args.seed,
        model: args.model,
        random_y: args.random_y,
    };
    if let Err(msg) = validate_train(&cfg) {
        return usage_error("train", &msg);
    }
    let metrics = match run_train(&cfg, args.checkpoint.as_deref()) {
        Ok(m) => m,
        Err(e) => return fail(&e.to_string()),
    };
    let mut csv = String::from(EpochMetric::csv_header());
    csv.push('\n');
    for m in &metrics {
        csv.push_str(&m.csv_line());
        csv.push('\n');
    }
    match write_output(args.out.as_deref(), &csv) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

/// Flag-level checks; anything failing here is a usage error, not a
/// runtime failure.
fn validate_train(cfg: &TrainConfig) -> Result<(), String> {
    if cfg.num_graphs == 0 {
        return Err("--num-graphs must be at least 1".into());
    }
    if cfg.nodes == 0 {
        return Err("--nodes must be at least 1".into());
    }
    if cfg.feature_dim == 0 {
        return Err("--feature-dim must be at least 1".into());
    }
    if cfg.batch_size == 0 {
        return Err("--batch-size must be at least 1".into());
    }
    let max_edges = cfg.nodes.saturating_mul(cfg.nodes - 1);
    if cfg.edges > max_edges {
        return Err(format!(
            "--edges {} exceeds the {} distinct non-loop edges possible with --nodes {}",
            cfg.edges, max_edges, cfg.nodes
        ));
    }
    if !cfg.lr.is_finite() {
        return Err("--lr must be finite".into());
    }
    // Grammar check on a throwaway stream so the training run's seed
    // stream is untouched.
    if let Err(e) = parse_model::<f32, _>(&cfg.model, &mut StdRng::seed_from_u64(0)) {
        return Err(format!("invalid --model: {e}"));
    }
    Ok(())
}

/// Dataset and weights come from one seeded stream. When the
/// checkpoint file exists its parameters replace the fresh weights
/// before training; either way the trained weights are saved back.
fn run_train(cfg: &TrainConfig, checkpoint: Option<&Path>) -> gnn::Result<Vec<EpochMetric>> {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let data = make_synthetic_dataset::<f32, _>(cfg, &mut rng)?;
    let mut chain = parse_model::<f32, _>(&cfg.model, &mut rng)?;
    if let Some(path) = checkpoint {
        if path.exists() {
            chain.load_param_map(&load_checkpoint::<f32, _>(path)?)?;
        }
    }
    let metrics = fit(&mut chain, &data, cfg)?;
    if let Some(path) = checkpoint {
        save_checkpoint(path, &chain.param_map())?;
    }
    Ok(metrics)
}

// ── bench ───────────────────────────────────────────────────────────

#[derive(Clone)]
struct BenchRow {
    n: usize,
    m: usize,
    d: usize,
    fused_us: f64,
    unfused_us: f64,
}

impl BenchRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.3}",
            self.n,
            self.m,
            self.d,
            self.fused_us,
            self.unfused_us,
            self.unfused_us / self.fused_us
        )
    }
}

fn cmd_bench(args: BenchArgs) -> i32 {
    if args.reps == 0 {
        return usage_error("bench", "--reps must be at least 1");
    }
    if args.threads == 0 {
        return usage_error("bench", "--threads must be at least 1");
    }
    let mut points = Vec::new();
    for &n in &args.nodes {
        for &m in &args.edges {
            for &d in &args.feature_dim {
                if n == 0 || d == 0 {
                    return usage_error("bench", "--nodes and --feature-dim must be at least 1");
                }
                let max_edges = n.saturating_mul(n - 1);
                if m > max_edges {
                    return usage_error(
                        "bench",
                        &format!(
                            "--edges {m} exceeds the {max_edges} distinct non-loop edges possible with --nodes {n}"
                        ),
                    );
                }
                points.push((n, m, d));
            }
        }
    }
    if points.is_empty() {
        return usage_error("bench", "the benchmark grid is empty");
    }
    let rows = match run_bench(&points, args.reps, args.warmup, args.seed, args.threads) {
        Ok(rows) => rows,
        Err(e) => return fail(&e),
    };
    let mut csv = String::from("n,m,d,fused_us,unfused_us,speedup\n");
    for row in &rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    match write_output(args.out.as_deref(), &csv) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

/// SplitMix64-style finalizer; each grid point gets its own seed so
/// the value columns never depend on --threads or scheduling.
fn point_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_bench(
    points: &[(usize, usize, usize)],
    reps: usize,
    warmup: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<BenchRow>, String> {
    let jobs: Vec<(usize, usize, usize, u64)> = points
        .iter()
        .enumerate()
        .map(|(i, &(n, m, d))| (n, m, d, point_seed(seed, i as u64)))
        .collect();
    if threads <= 1 {
        return jobs
            .iter()
            .map(|&(n, m, d, s)| bench_point(n, m, d, reps, warmup, s))
            .collect();
    }
    let workers = threads.min(jobs.len());
    let slots: Mutex<Vec<Option<Result<BenchRow, String>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for w in 0..workers {
            let jobs = &jobs;
            let slots = &slots;
            scope.spawn(move || {
                for (i, &(n, m, d, s)) in jobs.iter().enumerate().skip(w).step_by(workers) {
                    let row = bench_point(n, m, d, reps, warmup, s);
                    slots.lock().unwrap()[i] = Some(row);
                }
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every grid point ran"))
        .collect()
}

/// Checks the two paths agree before any timing; a disagreement makes
/// the timings meaningless, so it aborts the whole run.
fn bench_point(
    n: usize,
    m: usize,
    d: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchRow, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let graph = GnnGraph::<f64>::random(&mut rng, n, m).map_err(|e| e.to_string())?;
    let x = Tensor::<f64>::randn(vec![d, n], &mut rng);
    let fused = sum_neighbors(&graph, &x, PathChoice::Fused)?;
    let twostep = sum_neighbors(&graph, &x, PathChoice::TwoStep)?;
    let diff = fused.max_abs_diff(&twostep);
    if diff.is_nan() || diff >= 1e-6 {
        return Err(format!(
            "fused and two-step paths disagree at n={n} m={m} d={d}: max abs diff {diff:e}"
        ));
    }
    for _ in 0..warmup {
        std::hint::black_box(sum_neighbors(&graph, &x, PathChoice::Fused)?);
        std::hint::black_box(sum_neighbors(&graph, &x, PathChoice::TwoStep)?);
    }
    let fused_us = time_path(&graph, &x, PathChoice::Fused, reps)?;
    let unfused_us = time_path(&graph, &x, PathChoice::TwoStep, reps)?;
    Ok(BenchRow {
        n,
        m,
        d,
        fused_us,
        unfused_us,
    })
}

fn sum_neighbors(
    graph: &GnnGraph<f64>,
    x: &Tensor<f64>,
    path: PathChoice,
) -> Result<Tensor<f64>, String> {
    let mut tape = Tape::new();
    propagate(
        &mut tape,
        graph,
        &MessageFunction::CopyXj,
        Aggregation::Sum,
        None,
        Some(x),
        None,
        path,
    )
    .map_err(|e| e.to_string())
}

fn time_path(
    graph: &GnnGraph<f64>,
    x: &Tensor<f64>,
    path: PathChoice,
    reps: usize,
) -> Result<f64, String> {
    let started = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(sum_neighbors(graph, x, path)?);
    }
    Ok(started.elapsed().as_secs_f64() * 1e6 / reps as f64)
}

// ── gradcheck ───────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> i32 {
    let cfg = GradCheckConfig {
        seed: args.seed,
        sabotage: std::env::var(SABOTAGE_ENV).is_ok_and(|v| v == "1"),
        ..GradCheckConfig::default()
    };
    let rows = match gradcheck(&cfg, args.layer.as_deref()) {
        Ok(rows) => rows,
        Err(GnnError::Validation(msg)) => return usage_error("gradcheck", &msg),
        Err(e) => return fail(&e.to_string()),
    };
    println!(
        "{:<10} {:>9} {:>13}  worst",
        "layer", "instances", "max_rel_err"
    );
    for row in &rows {
        println!(
            "{:<10} {:>9} {:>13.3e}  {}",
            row.layer, row.instances, row.max_rel_err, row.worst_param
        );
    }
    let mut code = EXIT_OK;
    for row in rows.iter().filter(|r| !r.passed(cfg.tolerance)) {
        eprintln!(
            "gradient check failed: {} ({}) has max relative error {:.3e}, tolerance {:e}",
            row.layer, row.worst_param, row.max_rel_err, cfg.tolerance
        );
        code = EXIT_FAIL;
    }
    code
}
