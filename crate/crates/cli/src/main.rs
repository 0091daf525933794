//! `ndp`: generate datasets, train, evaluate, predict and run active
//! learning from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ndp::active::{active_learning_run, QueryPolicy, Strategy, DEFAULT_SAMPLES};
use ndp::data::{make_dataset, read_jsonl, Dataset, Task, TaskSpec, TimeSeries};
use ndp::model::{ContextSet, Model, PredictMode, Variant};
use ndp::vi::{evaluate_mse, train_with, write_run};
use serde::Serialize;

use config::{Resolved, RunConfig};

#[derive(Parser)]
#[command(name = "ndp", version, about = "Neural ODE Processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset and its spec sidecar.
    Generate(GenerateArgs),
    /// Train a model; writes checkpoint, history and resolved config.
    Train(TrainArgs),
    /// Report the test MSE of a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Export predictions for one series as CSV.
    Predict(PredictArgs),
    /// Greedy active learning over the series of a dataset file.
    Active(ActiveArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TaskSpec JSON; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Falls back to NDP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, short, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    model: Option<Variant>,
    /// Falls back to the config, then NDP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    control_dim: Option<usize>,
    #[arg(long)]
    eval_context: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    context_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines file holding the series.
    #[arg(long)]
    series: PathBuf,
    /// Line of the series within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Comma-separated indices of the context points.
    #[arg(long, value_delimiter = ',', required = true)]
    context_indices: Vec<usize>,
    /// Sampled trajectories in addition to the mean.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ActiveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines dataset file; every series is run.
    #[arg(long)]
    data: PathBuf,
    /// `max-uncertainty`, `random`, or `both`.
    #[arg(long, default_value = "both")]
    policy: String,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    init_context: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, default_value = "active")]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn env_seed() -> Outcome<Option<u64>> {
    match std::env::var("NDP_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(anyhow!("NDP_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Outcome<u64> {
    Ok(seed.or(env_seed()?).unwrap_or(0))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Outcome<Model> {
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("checkpoint not found: {}", path.display())));
    }
    Model::load(path).map(|(m, _)| m).usage()
}

fn load_series(path: &Path) -> Outcome<Vec<TimeSeries>> {
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("dataset not found: {}", path.display())));
    }
    let series = read_jsonl(path).usage()?;
    if series.is_empty() {
        return Err(Failure::Usage(anyhow!("{} holds no series", path.display())));
    }
    Ok(series)
}

fn generate(args: GenerateArgs) -> Outcome<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))
                .usage()?;
            serde_json::from_str::<TaskSpec>(&text)
                .with_context(|| format!("parsing spec {}", path.display()))
                .usage()?
        }
        None => TaskSpec::new(args.task.unwrap_or(Task::Sine), seed_or_env(None)?),
    };
    if let Some(task) = args.task {
        if task != spec.task {
            spec = TaskSpec {
                seed: spec.seed,
                ..TaskSpec::new(task, spec.seed)
            };
        }
    }
    if args.seed.is_some() || args.spec.is_none() {
        spec.seed = seed_or_env(args.seed)?;
    }
    if let Some(n) = args.train_count {
        spec.train_count = n;
    }
    if let Some(n) = args.test_count {
        spec.test_count = n;
    }
    spec.validate().usage()?;
    let data = make_dataset(&spec).runtime()?;
    data.write(&args.out).runtime()?;
    println!(
        "wrote {} train + {} test {} series to {}",
        data.train.len(),
        data.test.len(),
        spec.task,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Outcome<()> {
    let (mut cfg, echo) = match &args.config {
        Some(path) => {
            let (cfg, text) = RunConfig::from_file(path).usage()?;
            (cfg, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    cfg.merge(&RunConfig {
        task: args.task,
        model: args.model,
        seed: args.seed,
        data_dir: args.data_dir.clone(),
        output_dir: args.out.clone(),
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        latent_dim: args.latent_dim,
        control_dim: args.control_dim,
        eval_context: args.eval_context,
        train_count: args.train_count,
        test_count: args.test_count,
        ..RunConfig::default()
    });
    let resolved = cfg.resolve(env_seed()?).usage()?;
    let data = match &resolved.data_dir {
        Some(dir) => Dataset::read(dir, resolved.task.task).usage()?,
        None => make_dataset(&resolved.task).runtime()?,
    };
    let out = &resolved.output_dir;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    if let Some(text) = &echo {
        fs::write(out.join("config.json"), text).runtime()?;
    }
    write_json(&out.join("resolved.json"), &resolved).runtime()?;

    let Resolved { model: spec, train: tcfg, seed, .. } = &resolved;
    let mut model = Model::new(spec.clone(), *seed).runtime()?;
    if !args.quiet {
        eprintln!(
            "training {} on {} ({} parameters, {} epochs)",
            spec.variant,
            resolved.task.task,
            model.param_count(),
            tcfg.epochs
        );
    }
    let quiet = args.quiet;
    let history = train_with(&mut model, &data.train, &data.test, tcfg, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:>11.4}  test mse {:.5}  {:.1}s",
                r.epoch, r.train_loss, r.test_mse, r.seconds
            );
        }
    })
    .runtime()?;
    write_run(out, &model, *seed, &history).runtime()?;
    match history.best() {
        Some(best) => println!(
            "best epoch {} test mse {:.6}; wrote {}",
            best.epoch,
            best.test_mse,
            out.display()
        ),
        None => println!("no epochs run; wrote initial checkpoint to {}", out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    data: PathBuf,
    model: Variant,
    series: usize,
    context_size: usize,
    seed: u64,
    mse: f64,
}

fn eval_cmd(args: EvalArgs) -> Outcome<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let series = load_series(&args.data)?;
    let default_ctx = if model.spec().obs_dim == 1 { 10 } else { 90 };
    let context_size = args.context_size.unwrap_or(default_ctx);
    let seed = seed_or_env(args.seed)?;
    if series.iter().any(|s| s.len() < context_size) {
        return Err(Failure::Usage(anyhow!("context size {context_size} exceeds a series length")));
    }
    let mse = evaluate_mse(&model, &series, context_size, seed).runtime()?;
    let report = EvalReport {
        checkpoint: args.checkpoint,
        data: args.data,
        model: model.spec().variant,
        series: series.len(),
        context_size,
        seed,
        mse,
    };
    println!("{}", serde_json::to_string_pretty(&report).runtime()?);
    if let Some(out) = &args.out {
        write_json(out, &report).runtime()?;
    }
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Outcome<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let all = load_series(&args.series)?;
    let series = all
        .get(args.index)
        .ok_or_else(|| Failure::Usage(anyhow!("series index {} out of range ({} series)", args.index, all.len())))?;
    if let Some(&bad) = args.context_indices.iter().find(|&&i| i >= series.len()) {
        return Err(Failure::Usage(anyhow!("context index {bad} out of range ({} points)", series.len())));
    }
    let ctx = ContextSet::from_series(series, &args.context_indices);
    let mode = if args.samples == 0 {
        PredictMode::Mean
    } else {
        PredictMode::Sample {
            samples: args.samples,
            seed: seed_or_env(args.seed)?,
        }
    };
    let pred = model.predict(&ctx, &series.times, mode).runtime()?;
    let dim = model.spec().obs_dim;
    let suffix = |j: usize| if dim == 1 { String::new() } else { format!("_{j}") };
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|j| format!("y{}", suffix(j))));
    header.extend((0..dim).map(|j| format!("mean{}", suffix(j))));
    for s in 0..pred.samples.len() {
        header.extend((0..dim).map(|j| format!("sample{}{}", s + 1, suffix(j))));
    }
    let mut text = header.join(",") + "\n";
    for (i, t) in pred.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(series.values[i].iter().map(f64::to_string));
        row.extend(pred.mean.row(i).iter().map(f64::to_string));
        for s in &pred.samples {
            row.extend(s.row(i).iter().map(f64::to_string));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?,
        None => std::io::stdout().write_all(text.as_bytes()).runtime()?,
    }
    Ok(())
}

fn active_cmd(args: ActiveArgs) -> Outcome<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let series = load_series(&args.data)?;
    let strategies = match args.policy.as_str() {
        "both" => vec![Strategy::MaxUncertainty, Strategy::Random],
        other => vec![other.parse::<Strategy>().usage()?],
    };
    let seed = seed_or_env(args.seed)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .runtime()?;
    for strategy in strategies {
        let name = match strategy {
            Strategy::MaxUncertainty => "max-uncertainty",
            Strategy::Random => "random",
        };
        let mut mean_curve = vec![0.0; args.steps + 1];
        for (k, s) in series.iter().enumerate() {
            let policy = QueryPolicy {
                strategy,
                samples: args.samples,
                seed: seed.wrapping_mul(1000).wrapping_add(k as u64),
            };
            policy.validate().usage()?;
            if args.init_context == 0 || args.init_context + args.steps > s.len() {
                return Err(Failure::Usage(anyhow!(
                    "init context {} plus {} steps does not fit a {}-point series",
                    args.init_context,
                    args.steps,
                    s.len()
                )));
            }
            let run = active_learning_run(&model, s, args.init_context, args.steps, &policy).runtime()?;
            run.write_csv(&args.out.join(format!("{name}-{k}.csv"))).runtime()?;
            for (acc, v) in mean_curve.iter_mut().zip(run.mse_curve()) {
                *acc += v / series.len() as f64;
            }
        }
        let curve: Vec<String> = mean_curve.iter().map(|v| format!("{v:.5}")).collect();
        println!("{name}: mean mse by step {}", curve.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Active(a) => active_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
