use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mondeq::checkpoint::{load_model, spec_from_metadata};
use mondeq::{MonDEQModel, SolverConfig, SplittingMethod};
use mondeq_train::config::{Preset, TrainConfig, DATA_DIR_ENV};
use mondeq_train::data::DatasetSpec;
use mondeq_train::diagnostics::{best_trace, convergence_traces, default_grid, write_convergence_csv};
use mondeq_train::gradcheck::{run_suite, GradCheckConfig};
use mondeq_train::train::{evaluate, normalization_from_metadata, run_training};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mondeq", version, about = "Train and inspect monotone operator equilibrium networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset model and write metrics.csv and model.ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Emit per-iteration residual traces over a step-size grid as CSV.
    BenchSolver(BenchArgs),
    /// Compare implicit gradients with central finite differences on toy models.
    GradCheck(GradCheckArgs),
    /// Print checkpoint metadata and parameter shapes.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// fc-mnist, conv-mnist, multitier-mnist, conv-cifar or multitier-cifar.
    #[arg(long, default_value = "fc-mnist")]
    preset: Preset,
    /// key=value file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_steps: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    weight_norm: Option<bool>,
    /// pr or fb.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon_train: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Comma-separated list.
    #[arg(long)]
    alpha_candidates: Option<String>,
    /// 0 disables retuning.
    #[arg(long)]
    alpha_retune_every: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::for_preset(self.preset);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        fn put<T: ToString>(cfg: &mut TrainConfig, key: &str, v: &Option<T>) -> anyhow::Result<()> {
            if let Some(v) = v {
                cfg.set(key, &v.to_string())?;
            }
            Ok(())
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        put(&mut cfg, "train_limit", &self.train_limit)?;
        put(&mut cfg, "test_limit", &self.test_limit)?;
        put(&mut cfg, "epochs", &self.epochs)?;
        put(&mut cfg, "batch_size", &self.batch_size)?;
        put(&mut cfg, "lr", &self.lr)?;
        put(&mut cfg, "lr_decay_steps", &self.lr_decay_steps)?;
        put(&mut cfg, "lr_decay_factor", &self.lr_decay_factor)?;
        put(&mut cfg, "m", &self.m)?;
        put(&mut cfg, "weight_norm", &self.weight_norm)?;
        put(&mut cfg, "method", &self.method)?;
        put(&mut cfg, "alpha", &self.alpha)?;
        put(&mut cfg, "epsilon_train", &self.epsilon_train)?;
        put(&mut cfg, "max_iter", &self.max_iter)?;
        put(&mut cfg, "alpha_candidates", &self.alpha_candidates)?;
        put(&mut cfg, "alpha_retune_every", &self.alpha_retune_every)?;
        put(&mut cfg, "probe_size", &self.probe_size)?;
        put(&mut cfg, "augment", &self.augment)?;
        put(&mut cfg, "seed", &self.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to the step size stored in the checkpoint.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint; without it a freshly initialized preset model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "fc-mnist")]
    preset: Preset,
    #[command(flatten)]
    data: DataArgs,
    /// Number of test examples in the probe batch.
    #[arg(long, default_value_t = 128)]
    probe_size: usize,
    /// Comma-separated methods to run.
    #[arg(long, default_value = "pr,fb")]
    methods: String,
    /// Comma-separated step sizes for Peaceman-Rachford (default 2^-6..2^3).
    #[arg(long)]
    pr_alphas: Option<String>,
    /// Comma-separated step sizes for forward-backward (default 2^-8..2^-3).
    #[arg(long)]
    fb_alphas: Option<String>,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    abs_tol: f64,
}

fn parse_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?}")))
        .collect()
}

fn load_test_split(
    data: &DataArgs,
    preset: Preset,
    meta: Option<&std::collections::BTreeMap<String, String>>,
) -> anyhow::Result<mondeq_train::data::Dataset> {
    let Some(dir) = data.data_dir.clone() else {
        bail!("no data directory: pass --data-dir or set {DATA_DIR_ENV}");
    };
    let mut spec = DatasetSpec::new(preset.dataset(), dir);
    spec.test_limit = data.test_limit;
    spec.train_limit = Some(0);
    match meta.map(normalization_from_metadata) {
        Some(norm) => {
            let (_, mut test) = spec.load_raw()?;
            norm?.apply(&mut test);
            Ok(test)
        }
        None => {
            spec.train_limit = None;
            Ok(spec.load()?.test)
        }
    }
}

fn preset_of(meta: &std::collections::BTreeMap<String, String>) -> anyhow::Result<Preset> {
    let name = meta.get("preset").context("checkpoint does not record its preset")?;
    Ok(name.parse()?)
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    if args.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let splits = cfg.dataset_spec()?.load()?;
    log::info!(
        "{}: {} train / {} test examples",
        cfg.preset,
        splits.train.len(),
        splits.test.len()
    );
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let outcome = run_training(&cfg, &splits, true)?;
    let acc = outcome.final_test_accuracy().unwrap_or(f64::NAN);
    println!("final test accuracy {:.2}%", 100.0 * acc);
    if let Some(p) = outcome.checkpoint {
        println!("checkpoint {}", p.display());
    }
    if let Some(p) = outcome.metrics {
        println!("metrics {}", p.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (model, meta) = load_model(&args.checkpoint)?;
    let preset = preset_of(&meta)?;
    let test = load_test_split(&args.data, preset, Some(&meta))?;
    let method: SplittingMethod = meta.get("method").map_or(Ok(SplittingMethod::PeacemanRachford), |m| m.parse())?;
    let alpha = match (args.alpha, meta.get("alpha")) {
        (Some(a), _) => a,
        (None, Some(a)) => a.parse()?,
        (None, None) => 1.0,
    };
    let cfg = SolverConfig::new(method, alpha)
        .with_epsilon(args.epsilon)
        .with_max_iter(args.max_iter);
    let ev = evaluate(&model, &test, &cfg, args.batch_size)?;
    println!(
        "{} examples: loss {:.4}, accuracy {:.2}%, mean forward iterations {:.1} ({method}, alpha {alpha})",
        test.len(),
        ev.loss,
        100.0 * ev.accuracy,
        ev.mean_fwd_iters
    );
    if ev.unconverged_batches > 0 {
        eprintln!("warning: {} batches hit max_iter", ev.unconverged_batches);
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    let (model, preset, meta) = match &args.checkpoint {
        Some(p) => {
            let (model, meta) = load_model(p)?;
            (model, preset_of(&meta)?, Some(meta))
        }
        None => {
            let spec = args.preset.model_spec();
            let model = MonDEQModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
            (model, args.preset, None)
        }
    };
    let mut data = DataArgs {
        data_dir: args.data.data_dir.clone(),
        test_limit: Some(args.probe_size),
    };
    if let Some(limit) = args.data.test_limit {
        data.test_limit = Some(limit.min(args.probe_size));
    }
    let probe = load_test_split(&data, preset, meta.as_ref())?;
    let (x, _) = probe.gather(&(0..probe.len()).collect::<Vec<_>>());
    let mut grids = Vec::new();
    for m in args.methods.split(',') {
        let method: SplittingMethod = m.trim().parse()?;
        let custom = match method {
            SplittingMethod::PeacemanRachford => &args.pr_alphas,
            SplittingMethod::ForwardBackward => &args.fb_alphas,
        };
        let alphas = match custom {
            Some(text) => parse_list(text)?,
            None => default_grid(method),
        };
        grids.push((method, alphas));
    }
    let traces = convergence_traces(&model, &x, &grids, args.epsilon, args.max_iter)?;
    match &args.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
            write_convergence_csv(&mut w, &traces)?;
            w.flush()?;
        }
        None => write_convergence_csv(&mut std::io::stdout().lock(), &traces)?,
    }
    for t in &traces {
        let reached = t
            .iterations_to(args.epsilon)
            .map_or_else(|| format!("not reached in {}", t.residuals.len()), |k| format!("{k} iterations"));
        let flag = if t.diverged() { " (divergent)" } else { "" };
        eprintln!("{} alpha={}: {reached}, final residual {:.3e}{flag}", t.method, t.alpha, t.final_residual());
    }
    for (method, _) in &grids {
        if let Some((t, k)) = best_trace(&traces, *method, args.epsilon) {
            eprintln!("best {method}: alpha={} in {k} iterations", t.alpha);
        }
    }
    Ok(())
}

fn cmd_grad_check(args: &GradCheckArgs) -> anyhow::Result<bool> {
    let cfg = GradCheckConfig {
        step: args.step,
        rel_tol: args.rel_tol,
        abs_tol: args.abs_tol,
        ..GradCheckConfig::default()
    };
    let reports = run_suite(args.seed, &cfg)?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{:<14} {} entries, worst error/bound {:.2e} {}",
            r.label,
            r.checked(),
            r.worst_ratio(),
            if r.passed() { "ok" } else { "FAILED" }
        );
        for p in r.params.iter().filter(|p| p.failures > 0) {
            println!(
                "  {}[{}]: analytic {:e}, numeric {:e} ({} of {} entries out of tolerance)",
                p.name, p.worst_index, p.worst_analytic, p.worst_numeric, p.failures, p.entries
            );
        }
    }
    Ok(ok)
}

fn cmd_inspect(path: &PathBuf) -> anyhow::Result<()> {
    let ckpt = mondeq::checkpoint::Checkpoint::load(path)?;
    for (k, v) in &ckpt.metadata {
        println!("{k} = {v}");
    }
    spec_from_metadata(&ckpt.metadata)?;
    let mut total = 0;
    for (name, t) in &ckpt.tensors {
        total += t.len();
        println!("{name:<14} {:?}", t.shape());
    }
    println!("parameters = {total}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchSolver(a) => cmd_bench(a),
        Command::GradCheck(a) => match cmd_grad_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
