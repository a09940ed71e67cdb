use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sparseset_cli::{execute, init_threads, parse_set, resolve, CliError, Command, Overrides, Preset};
use sparseset_core::eval::Method;
use sparseset_core::mechanistic::ModelKind;

/// Deep Set forecasting benchmark on simulated bioprocess data.
#[derive(Parser)]
#[command(name = "sparseset", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate the train/val/test dataset.
    Generate,
    /// Train the Deep Set forecasters.
    Train,
    /// Fit the mechanistic model to each test context.
    Fit,
    /// Score every method on the test split.
    Evaluate,
    /// Collect scores into results.csv, results.md and plots.
    Report,
    /// All of the above in order.
    RunAll,
}

#[derive(Args)]
struct Opts {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Methods to run, comma separated (triplet, linear, rbf, fit, ground_truth).
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    method: Option<Vec<Method>>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_val: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    obs_per_part: Option<usize>,
    /// Training steps for every network method.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    val_every: Option<usize>,
    #[arg(long, global = true)]
    multistart: Option<usize>,
    #[arg(long, global = true)]
    fit_limit: Option<usize>,
    #[arg(long, global = true)]
    bootstrap_resamples: Option<usize>,
    #[arg(long, global = true)]
    n_plots: Option<usize>,
    /// Any config key, e.g. `--set generation.t_split=2.5` or `--set train.*.latent_dim=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::from_id(s).ok_or_else(|| format!("unknown model `{s}` (mmk, ecoli)"))
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::from_id(s).ok_or_else(|| format!("unknown preset `{s}` (smoke, benchmark)"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_id(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn overrides(o: Opts) -> Result<(Option<PathBuf>, Overrides), CliError> {
    let mut sets: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            sets.push((k.to_string(), v));
        }
    };
    put("generation.n_train", o.n_train.map(Value::from));
    put("generation.n_val", o.n_val.map(Value::from));
    put("generation.n_test", o.n_test.map(Value::from));
    put("generation.obs_per_part", o.obs_per_part.map(Value::from));
    put("train.*.steps", o.steps.map(Value::from));
    put("train.*.batch_size", o.batch_size.map(Value::from));
    put("train.*.lr", o.lr.map(Value::from));
    put("train.*.val_every", o.val_every.map(Value::from));
    put("fit.multistart", o.multistart.map(Value::from));
    put("fit_limit", o.fit_limit.map(Value::from));
    put("evaluation.bootstrap_resamples", o.bootstrap_resamples.map(Value::from));
    put("evaluation.n_plots", o.n_plots.map(Value::from));
    for s in &o.sets {
        sets.push(parse_set(s)?);
    }
    Ok((
        o.config,
        Overrides {
            model: o.model,
            preset: o.preset,
            seed: o.seed,
            out: o.out,
            threads: o.threads,
            methods: o.method,
            sets,
        },
    ))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cmd = match cli.cmd {
        Cmd::Generate => Command::Generate,
        Cmd::Train => Command::Train,
        Cmd::Fit => Command::Fit,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Report => Command::Report,
        Cmd::RunAll => Command::RunAll,
    };
    let (file, ov) = overrides(cli.opts)?;
    let cfg = resolve(file.as_deref(), &ov)?;
    init_threads(cfg.threads);
    execute(cmd, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let started = std::time::Instant::now();
    match run(Cli::parse()) {
        Ok(()) => {
            log::info!("finished in {:.1}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
