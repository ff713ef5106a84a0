//! `sdgp`: train networks with structured data gradient pruning, sweep n:m
//! patterns, profile conv layers, and project speedups.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 1 for
//! everything else (I/O failures, diverged runs).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sdgp_core::config::{self, DatasetSpec, ExperimentConfig, PruneSpec};
use sdgp_core::nn::checkpoint;
use sdgp_core::perf::{self, TimingProfile, TtaEstimate};
use sdgp_core::rng::{self, DOMAIN_INIT, DOMAIN_PROFILE};
use sdgp_core::train::{self, EpochMetric};
use sdgp_core::{Error as CoreError, PruneFunction};

#[derive(Parser)]
#[command(
    name = "sdgp",
    version,
    about = "Train and study networks whose conv data gradients are pruned to n:m sparsity"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment and write its artifacts.
    Train(TrainArgs),
    /// Train one config across a grid of n:m patterns.
    Sweep(SweepArgs),
    /// Measure per-conv-layer forward/backward wall times.
    Profile(ProfileArgs),
    /// Project speedup (and optionally time-to-accuracy) for an n:m pattern.
    Estimate(EstimateArgs),
    /// Check a config without training.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; beats config `out_dir` and `SDGP_OUT_DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the prune pattern ("2:4"), or "off" to train dense.
    #[arg(long)]
    prune: Option<String>,
    /// Replace the prune function (requires a prune pattern).
    #[arg(long, value_enum)]
    function: Option<FunctionArg>,
    /// Replace the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config JSON; its prune block (if any) supplies the
    /// function and rescale scope for every cell.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated n:m cells, e.g. "1:4,2:4,4:4".
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated n values, crossed with --ms.
    #[arg(long)]
    ns: Option<String>,
    /// Comma-separated m values, crossed with --ns.
    #[arg(long)]
    ms: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads running cells in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    function: Option<FunctionArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Experiment config JSON (supplies the model and input shape).
    #[arg(long)]
    config: PathBuf,
    /// Timed repetitions per phase; the median is recorded.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Batch size of the profiled input; defaults to optimizer.batch_size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(
    clap::ArgGroup::new("fraction_source")
        .required(true)
        .args(["fraction", "timing"])
))]
struct EstimateArgs {
    /// Data-gradient time fraction f in [0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// timing.csv from `sdgp profile` to read f from.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    /// metrics.csv of a dense run, for the time-to-accuracy projection.
    #[arg(long, requires = "target_acc")]
    metrics: Option<PathBuf>,
    /// Target validation accuracy (percent) the projection should reach.
    #[arg(long, requires = "metrics")]
    target_acc: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FunctionArg {
    Random,
    Magnitude,
    RescaledMagnitude,
}

impl From<FunctionArg> for PruneFunction {
    fn from(f: FunctionArg) -> Self {
        match f {
            FunctionArg::Random => PruneFunction::Random,
            FunctionArg::Magnitude => PruneFunction::Magnitude,
            FunctionArg::RescaledMagnitude => PruneFunction::RescaledMagnitude,
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (`sdgp train | head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if matches!(err.downcast_ref::<CoreError>(), Some(CoreError::Config(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Profile(args) => cmd_profile(args),
        Cmd::Estimate(args) => cmd_estimate(args),
        Cmd::Validate(args) => cmd_validate(args),
    }
}

fn config_err(msg: String) -> anyhow::Error {
    CoreError::Config(msg).into()
}

/// --out beats the config's `out_dir`, which beats `SDGP_OUT_DIR`, which
/// beats the literal "out".
fn resolve_out_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("SDGP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_pattern(s: &str) -> anyhow::Result<(usize, usize)> {
    let (n, m) = s
        .split_once(':')
        .ok_or_else(|| config_err(format!("pattern {s:?} is not of the form n:m")))?;
    let parse = |v: &str| -> anyhow::Result<usize> {
        v.trim()
            .parse()
            .map_err(|_| config_err(format!("pattern {s:?} has non-numeric part {v:?}")))
    };
    Ok((parse(n)?, parse(m)?))
}

fn apply_prune_overrides(
    cfg: &mut ExperimentConfig,
    prune: &Option<String>,
    function: Option<FunctionArg>,
) -> anyhow::Result<()> {
    if let Some(pattern) = prune {
        if pattern == "off" || pattern == "none" {
            cfg.prune = None;
        } else {
            let (n, m) = parse_pattern(pattern)?;
            match &mut cfg.prune {
                Some(spec) => {
                    spec.n = n;
                    spec.m = m;
                }
                None => {
                    cfg.prune = Some(PruneSpec {
                        function: PruneFunction::RescaledMagnitude,
                        n,
                        m,
                        seed: 0,
                        rescale: Default::default(),
                    });
                }
            }
        }
    }
    if let Some(f) = function {
        match &mut cfg.prune {
            Some(spec) => spec.function = f.into(),
            None => {
                return Err(config_err(
                    "--function needs a prune pattern (config prune block or --prune n:m)".into(),
                ));
            }
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_file(path)?)
}

fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    history: &[EpochMetric],
    network: Option<&sdgp_core::nn::Network>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    // The snapshot drops out_dir so artifacts do not depend on where they
    // were written.
    let mut snap = cfg.clone();
    snap.out_dir = None;
    std::fs::write(dir.join("config.snapshot.json"), snap.to_snapshot_json()?)?;
    train::write_metrics_csv(history, &dir.join("metrics.csv"))?;
    train::write_metrics_jsonl(history, &dir.join("metrics.jsonl"))?;
    if let Some(net) = network {
        checkpoint::save(net, &dir.join("model.ckpt"))?;
    }
    Ok(())
}

fn describe_prune(cfg: &ExperimentConfig) -> String {
    match &cfg.prune {
        None => "dense".to_string(),
        Some(p) => format!("{:?} {}:{}", p.function, p.n, p.m),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.optimizer.epochs = epochs;
    }
    apply_prune_overrides(&mut cfg, &args.prune, args.function)?;
    cfg.validate()?;

    let dir = resolve_out_dir(args.out, &cfg);
    println!(
        "training: {} epochs, {}, seed {}",
        cfg.optimizer.epochs,
        describe_prune(&cfg),
        cfg.seed
    );
    let outcome = train::train(&cfg)?;
    for row in &outcome.state.history {
        println!(
            "epoch {:>3}  wall {:>8.2}s  loss {:.4}  val_top1 {:.2}%",
            row.epoch, row.wall_s, row.train_loss, row.val_top1
        );
    }
    write_run_artifacts(&dir, &cfg, &outcome.state.history, Some(&outcome.network))?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn parse_usize_list(flag: &str, s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| config_err(format!("{flag} has non-numeric entry {v:?}")))
        })
        .collect()
}

/// Grid cells from --grid and/or the --ns x --ms cross product, sorted by
/// (m, n) and deduplicated. Cells with n > m are skipped with a warning.
fn sweep_cells(args: &SweepArgs) -> anyhow::Result<Vec<(usize, usize)>> {
    let mut cells = Vec::new();
    if let Some(grid) = &args.grid {
        for part in grid.split(',') {
            cells.push(parse_pattern(part.trim())?);
        }
    }
    match (&args.ns, &args.ms) {
        (Some(ns), Some(ms)) => {
            let ns = parse_usize_list("--ns", ns)?;
            let ms = parse_usize_list("--ms", ms)?;
            for &m in &ms {
                for &n in &ns {
                    cells.push((n, m));
                }
            }
        }
        (None, None) => {}
        _ => return Err(config_err("--ns and --ms must be given together".into())),
    }
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (n, m) in cells {
        if n > m {
            eprintln!("skipping {n}:{m} (n > m)");
        } else {
            kept.push((n, m));
        }
    }
    kept.sort_by_key(|&(n, m)| (m, n));
    kept.dedup();
    if kept.is_empty() {
        return Err(config_err("sweep needs cells from --grid or --ns/--ms".into()));
    }
    Ok(kept)
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let mut base = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.optimizer.epochs = epochs;
    }
    let cells = sweep_cells(&args)?;
    let template = base.prune.clone();
    let function: PruneFunction = args
        .function
        .map(Into::into)
        .or(template.as_ref().map(|p| p.function))
        .unwrap_or(PruneFunction::RescaledMagnitude);

    let mut configs = Vec::with_capacity(cells.len());
    for &(n, m) in &cells {
        let mut cfg = base.clone();
        cfg.prune = Some(PruneSpec {
            function,
            n,
            m,
            seed: template.as_ref().map_or(0, |p| p.seed),
            rescale: template.as_ref().map(|p| p.rescale).unwrap_or_default(),
        });
        cfg.validate()?;
        configs.push(cfg);
    }

    let dir = resolve_out_dir(args.out, &base);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let (train_ds, val_ds) = config::load_datasets(&base)?;
    let workers = args.workers.max(1).min(cells.len());
    println!(
        "sweep: {} cells, {:?} pruning, {} worker{}",
        cells.len(),
        function,
        workers,
        if workers == 1 { "" } else { "s" }
    );

    struct Cell {
        index: usize,
        top1: f64,
    }
    let queue = Mutex::new((0..cells.len()).collect::<Vec<usize>>());
    let done: Mutex<Vec<Cell>> = Mutex::new(Vec::with_capacity(cells.len()));
    std::thread::scope(|scope| -> anyhow::Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| -> anyhow::Result<()> {
                loop {
                    let index = match queue.lock().unwrap().pop() {
                        Some(i) => i,
                        None => return Ok(()),
                    };
                    let cfg = &configs[index];
                    let (n, m) = cells[index];
                    let outcome = train::train_with_data(cfg, &train_ds, &val_ds)
                        .with_context(|| format!("cell {n}:{m}"))?;
                    let history = &outcome.state.history;
                    let top1 = history.last().map_or(0.0, |r| r.val_top1);
                    write_run_artifacts(&dir.join(format!("n{n}m{m}")), cfg, history, None)?;
                    println!("cell {n}:{m}  val_top1 {top1:.2}%");
                    done.lock().unwrap().push(Cell { index, top1 });
                }
            }));
        }
        for handle in handles {
            handle.join().expect("sweep worker panicked")?;
        }
        Ok(())
    })?;

    let mut rows = done.into_inner().unwrap();
    rows.sort_by_key(|c| c.index);
    let mut grid_csv = String::from("n,m,r,val_top1\n");
    for cell in &rows {
        let (n, m) = cells[cell.index];
        grid_csv.push_str(&format!("{n},{m},{:.4},{:.4}\n", m as f64 / n as f64, cell.top1));
    }
    std::fs::write(dir.join("grid.csv"), grid_csv)?;
    println!("grid written to {}", dir.join("grid.csv").display());
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dims = cfg.dataset.input_dims();
    let mut net = config::build_network(
        &cfg.model,
        dims,
        cfg.dataset.num_classes(),
        cfg.prune.as_ref().map(|p| p.m),
        rng::derive_seed(cfg.seed, DOMAIN_INIT),
    )?;
    let batch = args.batch.unwrap_or(cfg.optimizer.batch_size);
    let profile = perf::profile_network(
        &mut net,
        dims,
        batch,
        args.repeats,
        rng::derive_seed(cfg.seed, DOMAIN_PROFILE),
    )?;

    println!("{:<8} {:>12} {:>12} {:>12}", "layer", "fwd_ms", "bwd_data_ms", "bwd_w_ms");
    for l in &profile.layers {
        println!(
            "{:<8} {:>12.3} {:>12.3} {:>12.3}",
            l.layer,
            l.forward_s * 1e3,
            l.backward_data_s * 1e3,
            l.backward_weight_s * 1e3
        );
    }
    let f = profile.data_grad_fraction()?;
    println!("total {:.3} ms, data-gradient fraction f = {:.4}", profile.total_s() * 1e3, f);
    if let Some(p) = &cfg.prune {
        let est = perf::estimate_speedup(f, p.n, p.m)?;
        println!(
            "pattern {}:{} projects a {:.2}% reduction of recorded conv time",
            p.n, p.m, est.total_reduction_percent
        );
    }

    let dir = resolve_out_dir(args.out, &cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("timing.csv");
    profile.write_csv(&path)?;
    println!("profile written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EstimateReport {
    n: usize,
    m: usize,
    #[serde(flatten)]
    speedup: perf::SpeedupEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    tta: Option<TtaEstimate>,
}

fn cmd_estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let fraction = match (args.fraction, &args.timing) {
        (Some(f), None) => f,
        (None, Some(path)) => TimingProfile::read_csv(path)?.data_grad_fraction()?,
        _ => unreachable!("clap group enforces exactly one source"),
    };
    let speedup = perf::estimate_speedup(fraction, args.n, args.m)?;
    println!(
        "f = {:.4}, pattern {}:{} (r = {:.2})",
        speedup.data_grad_fraction, args.n, args.m, speedup.sparsity_ratio
    );
    println!(
        "data-gradient share falls to {:.4}; total recorded time drops {:.2}%",
        speedup.reduced_fraction, speedup.total_reduction_percent
    );

    let tta = match (&args.metrics, args.target_acc) {
        (Some(path), Some(target)) => {
            let rows = train::read_metrics_csv(path)?;
            let est = perf::estimate_tta(&rows, target, fraction, args.n, args.m)?;
            match &est {
                TtaEstimate::Reached { seconds, epoch } => println!(
                    "projected time to {target:.2}% val_top1: {seconds:.1}s (epoch {epoch})"
                ),
                TtaEstimate::NotReached => {
                    println!("target {target:.2}% val_top1 is not reached in the metric stream")
                }
            }
            Some(est)
        }
        _ => None,
    };

    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let report = EstimateReport {
            n: args.n,
            m: args.m,
            speedup,
            tta,
        };
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        let path = dir.join("estimate.json");
        std::fs::write(&path, json)?;
        println!("estimate written to {}", path.display());
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    let dims = cfg.dataset.input_dims();
    let net = config::build_network(
        &cfg.model,
        dims,
        cfg.dataset.num_classes(),
        cfg.prune.as_ref().map(|p| p.m),
        0,
    )?;
    let kind = match &cfg.dataset {
        DatasetSpec::Synthetic { .. } => "synthetic",
        DatasetSpec::Mnist { .. } => "mnist",
        DatasetSpec::Cifar10 { .. } => "cifar10",
    };
    println!(
        "dataset: {kind}, {}x{}x{} inputs, {} classes",
        dims.0,
        dims.1,
        dims.2,
        cfg.dataset.num_classes()
    );
    println!(
        "model: {} top-level layers, {} parameters",
        cfg.model.layers.len(),
        net.num_params()
    );
    println!(
        "optimizer: lr {} for {} epochs, batch {}",
        cfg.optimizer.lr, cfg.optimizer.epochs, cfg.optimizer.batch_size
    );
    println!("pruning: {}", describe_prune(&cfg));
    println!("config ok");
    Ok(())
}
