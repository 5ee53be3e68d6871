use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use resfeat::config::{resolve_spec, ConfigFile};
use resfeat::data::{default_root, Dataset, DatasetKind, DatasetSource, Split};
use resfeat::gradcheck;
use resfeat::network::{count_spec, format_count, matches_printed, NetworkSpec, StemKind};
use resfeat::solver;
use resfeat::sweep::{run_sweep, SweepConfig, SWEEP_HEADER};
use resfeat::train::{self, evaluate, RunOptions, TrainConfig};
use resfeat::{checkpoint, par};

#[derive(Parser)]
#[command(name = "resfeat", version, about = "ResNet blocks as iterative solvers: training, counting and verification")]
struct Cli {
    /// Single-threaded, inline data loading; runs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and write metrics and checkpoints.
    Train(TrainArgs),
    /// TOP-1 accuracy of a checkpoint on a test split.
    Eval(EvalArgs),
    /// Parameter inventory of a network.
    CountParams(CountArgs),
    /// Run a solver verification suite.
    Verify(VerifyArgs),
    /// Finite-difference gradient checks in f64.
    Gradcheck(GradArgs),
    /// Train every operator-form combination of the feature-based network.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name, JSON spec or key-value config file.
    #[arg(long)]
    spec: String,
    /// Key-value file with training settings (and optionally network keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// mnist, cifar10 or cifar100; inferred from the network when omitted.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_subset: Option<usize>,
    #[arg(long)]
    test_subset: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    test_subset: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    spec: String,
    /// Printed count such as `8.1M`; exits nonzero unless the total rounds to it.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Theorem1,
    Constraint,
    Richardson,
    Pixel,
}

#[derive(Args)]
struct VerifyArgs {
    suite: Suite,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// Maximum depth of the random composite graphs.
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 20)]
    composites: usize,
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Table1,
}

#[derive(Args)]
struct SweepArgs {
    kind: SweepKind,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Training samples drawn from the CIFAR-10 training split.
    #[arg(long, default_value_t = 2048)]
    subset: usize,
    /// Test samples to evaluate; 0 skips evaluation.
    #[arg(long, default_value_t = 0)]
    test_subset: usize,
    /// Level widths, comma separated.
    #[arg(long, default_value = "16,32,64,128", value_delimiter = ',')]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_threads(cli.deterministic) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn setup_threads(deterministic: bool) -> Result<()> {
    if deterministic {
        par::set_parallel(false);
        return Ok(());
    }
    if let Ok(v) = std::env::var("RESFEAT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("RESFEAT_THREADS={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("RESFEAT_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        if n == 1 {
            par::set_parallel(false);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let det = cli.deterministic;
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a, det),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::CountParams(a) => cmd_count(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Sweep(a) => cmd_sweep(a, det),
    }
}

fn dataset_kind(arg: Option<&str>, spec: &NetworkSpec) -> Result<DatasetKind> {
    if let Some(s) = arg {
        return Ok(DatasetKind::parse(s)?);
    }
    Ok(match (spec.stem, spec.num_classes) {
        (StemKind::SmallImage, _) => DatasetKind::MnistIdx,
        (StemKind::Cifar, 100) => DatasetKind::Cifar100Bin,
        (StemKind::Cifar, _) => DatasetKind::Cifar10Bin,
        (StemKind::LargeImage, _) => bail!("the large-image network is available for counting only"),
    })
}

fn load(kind: DatasetKind, root: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let d = DatasetSource::new(kind, root, split)
        .load()
        .with_context(|| format!("loading {kind:?} {split:?} from {}", root.display()))?;
    Ok(match subset {
        Some(n) if n < d.len() => d.subset(n, seed)?,
        _ => d,
    })
}

fn cmd_train(a: TrainArgs, det: bool) -> Result<bool> {
    let mut spec = resolve_spec(&a.spec)?;
    let file = a.config.as_deref().map(ConfigFile::read).transpose()?;
    if let Some(f) = &file {
        if f.get("preset").is_some() || f.get("family").is_some() {
            spec = f.network_spec()?;
        }
    }
    let mut cfg = match &file {
        Some(f) => f.train_config(&spec)?,
        None => TrainConfig::for_spec(&spec),
    };
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.train_subset = a.train_subset.or(cfg.train_subset);
    cfg.test_subset = a.test_subset.or(cfg.test_subset);
    if det {
        cfg.prefetch = 0;
    }
    cfg.validate()?;
    let from_file = file.as_ref().map(|f| f.dataset()).transpose()?.flatten();
    let kind = match (a.dataset.as_deref(), from_file) {
        (None, Some(k)) => k,
        (d, _) => dataset_kind(d, &spec)?,
    };
    let root = a.data.unwrap_or_else(default_root);
    let train_set = load(kind, &root, Split::Train, cfg.train_subset, cfg.seed)?;
    let test_set = load(kind, &root, Split::Test, cfg.test_subset, cfg.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    eprintln!(
        "training {} parameters on {} samples, {} epochs",
        count_spec(&spec)?.total,
        train_set.len(),
        cfg.total_epochs
    );
    let mut log = |r: &train::MetricsRow| eprintln!("{}", r.csv());
    let out = train::train(
        &spec,
        Arc::new(train_set),
        Some(&test_set),
        &cfg,
        RunOptions { out_dir: Some(a.out.clone()), on_epoch: Some(&mut log) },
    )?;
    for c in &out.checkpoints {
        println!("checkpoint {}", c.display());
    }
    if let Some(last) = out.metrics.last() {
        println!("final test_top1 {:.2}", last.test_top1.unwrap_or(f64::NAN));
    }
    Ok(true)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let model = checkpoint::load::<f32>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let norm = train::load_normalization(&a.checkpoint)?;
    let kind = dataset_kind(a.dataset.as_deref(), model.spec())?;
    let root = a.data.unwrap_or_else(default_root);
    let test = load(kind, &root, Split::Test, a.test_subset, 0)?;
    let top1 = evaluate(&model, &test, norm.as_ref(), 256)?;
    println!("test_top1 {top1:.4} on {} samples", test.len());
    Ok(true)
}

fn cmd_count(a: CountArgs) -> Result<bool> {
    let spec = resolve_spec(&a.spec)?;
    let s = count_spec(&spec)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("total {} ({})", s.total, format_count(s.total, 1));
        for (m, n) in &s.per_module {
            println!("  {m:<10} {n}");
        }
        for lv in &s.levels {
            println!("level {} ({} blocks)", lv.level, lv.blocks);
            for k in &lv.kernels {
                println!("  {:<22} {:?} used {}x", k.name, k.shape, k.uses);
            }
        }
    }
    if let Some(e) = &a.expect {
        let ok = matches_printed(s.total, e)?;
        println!("expect {e}: {}", if ok { "match" } else { "MISMATCH" });
        return Ok(ok);
    }
    Ok(true)
}

fn write_report(path: Option<&Path>, json: String) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let pass = match a.suite {
        Suite::Theorem1 => {
            let r = solver::theorem1_sweep(a.trials.unwrap_or(25), a.seed, a.tol.unwrap_or(1e-10))?;
            for t in &r.trials {
                println!(
                    "seed {:>4} channels {} grid {:>2} steps {:>2} sigma_min {:.3e} gap {:.3e} {}",
                    t.seed,
                    t.channels,
                    t.grid,
                    t.steps,
                    t.sigma_min,
                    t.max_abs_gap,
                    if t.pass { "ok" } else { "FAIL" }
                );
            }
            println!("theorem1: {} trials, max gap {:.3e}, tol {:e}: {}", r.trials.len(), r.max_abs_gap, r.tolerance, verdict(r.pass));
            write_report(a.report.as_deref(), serde_json::to_string_pretty(&r)?)?;
            r.pass
        }
        Suite::Constraint => {
            let r = solver::constraint_sweep(a.trials.unwrap_or(1000), a.seed)?;
            println!("constraint: {} runs, smallest iterate entry {:e}: {}", r.trials, r.min_entry, verdict(r.pass));
            write_report(a.report.as_deref(), serde_json::to_string_pretty(&r)?)?;
            r.pass
        }
        Suite::Richardson => {
            let r = solver::richardson_sweep(a.trials.unwrap_or(10), a.seed, 50)?;
            for t in &r.trials {
                println!(
                    "seed {:>3} lambda_max {:.4} omega*lambda {:.1} predicted {} monotone {} |r0| {:.3e} |rN| {:.3e} {}",
                    t.seed,
                    t.lambda_max,
                    t.omega * t.lambda_max,
                    if t.predicted_convergent { "converge" } else { "diverge" },
                    t.monotone,
                    t.first_norm,
                    t.last_norm,
                    if t.agrees { "ok" } else { "FAIL" }
                );
            }
            println!("richardson: {}", verdict(r.pass));
            write_report(a.report.as_deref(), serde_json::to_string_pretty(&r)?)?;
            r.pass
        }
        Suite::Pixel => {
            let r = solver::pixel_experiment(8, a.seed)?;
            println!("one-pixel residual on {0}x{0}", r.n);
            println!("  S(r) max abs                  {}", r.subsampled_max_abs);
            println!("  all-ones stride-2 conv entry  {}", r.strided_entry);
            println!("  restrict-then-convolve max    {}", r.subsample_path_max_abs);
            println!("pixel: {}", verdict(r.pass));
            write_report(a.report.as_deref(), serde_json::to_string_pretty(&r)?)?;
            r.pass
        }
    };
    Ok(pass)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_gradcheck(a: GradArgs) -> Result<bool> {
    let r = gradcheck::run_suite(a.composites, a.depth, a.seed, gradcheck::STEP, a.tol)?;
    for c in &r.checks {
        println!("{:<28} {:>5} entries  rel err {:.3e}", c.name, c.entries, c.max_rel_error);
    }
    println!("gradcheck: {} checks, max rel err {:.3e}, tol {:e}: {}", r.checks.len(), r.max_rel_error, r.tolerance, verdict(r.pass));
    write_report(a.report.as_deref(), serde_json::to_string_pretty(&r)?)?;
    Ok(r.pass)
}

fn cmd_sweep(a: SweepArgs, det: bool) -> Result<bool> {
    let SweepKind::Table1 = a.kind;
    let root = a.data.unwrap_or_else(default_root);
    let train_set = load(DatasetKind::Cifar10Bin, &root, Split::Train, Some(a.subset), a.seed)?;
    let test_set = match a.test_subset {
        0 => None,
        n => Some(load(DatasetKind::Cifar10Bin, &root, Split::Test, Some(n), a.seed)?),
    };
    let mut train = TrainConfig { seed: a.seed, ..TrainConfig::default() };
    if det {
        train.prefetch = 0;
    }
    let cfg = SweepConfig { channels: a.channels, epochs: a.epochs, probe: 256, train };
    let mut lines = vec![SWEEP_HEADER.to_string()];
    if a.out.is_none() {
        println!("{SWEEP_HEADER}");
    }
    let rows = run_sweep(Arc::new(train_set), test_set.as_ref(), &cfg, |r| {
        if a.out.is_none() {
            println!("{}", r.csv());
        } else {
            eprintln!("{}", r.csv());
        }
        if let Some(e) = &r.error {
            eprintln!("  {}-{} stopped: {e}", r.a_form.label(), r.b_form.label());
        }
    })?;
    lines.extend(rows.iter().map(|r| r.csv()));
    if let Some(p) = &a.out {
        fs::write(p, lines.join("\n") + "\n")?;
        println!("sweep written to {}", p.display());
    }
    Ok(rows.iter().all(|r| r.error.is_none()))
}
