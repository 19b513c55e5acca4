//! The `branchynet` command line: train the baseline, warm-start and train
//! the branchy network, evaluate at fixed thresholds, screen thresholds and
//! classify single samples.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use branchynet_core::config::{parse_config, B_LENET_CONFIG};
use branchynet_core::data::{Dataset, DatasetSplit, MnistFiles};
use branchynet_core::graph::{Network, NetworkSpec};
use branchynet_core::inference::{evaluate, fast_inference, trace_csv, ThresholdVector};
use branchynet_core::model_io::{load_model, save_model, write_atomic, LoadedModel};
use branchynet_core::screening::{default_grid, sweep, KneeStatus, DEFAULT_SLACK_PP};
use branchynet_core::training::{
    init_branchy_from_baseline, metrics_csv, train_baseline, train_branchy, Phase, TrainConfig,
};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_VALIDATION_SIZE: usize = 5000;

#[derive(Debug, Parser)]
#[command(name = "branchynet", version, about = "Early-exit network training and entropy-gated inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the trunk alone (phase one).
    TrainBaseline(TrainArgs),
    /// Warm-start the branchy network from a baseline model and train every exit jointly (phase two).
    TrainBranchy(TrainArgs),
    /// Fast inference over the test split at fixed thresholds; prints a results-table row.
    Eval(EvalArgs),
    /// Screen a grid of thresholds and pick the knee.
    Sweep(SweepArgs),
    /// Classify one test sample.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Seed for the train/validation split and training.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Training examples moved into the validation split.
    #[arg(long, default_value_t = DEFAULT_VALIDATION_SIZE)]
    pub validation_size: usize,
    /// Use only the first N training examples (before splitting).
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network/training config; defaults to the bundled B-LeNet.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Baseline model to warm-start from (train-branchy only).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_in: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated entropy thresholds, one per early exit. Defaults to all zeros.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Per-sample trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model_in: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Candidate values: coordinates separated by `;`, values by `,`.
    /// Defaults to 0 plus 25 log-spaced values in [1e-4, ln C] per coordinate.
    #[arg(long)]
    pub grid: Option<String>,
    /// Accuracy slack below the baseline, in percentage points.
    #[arg(long, default_value_t = DEFAULT_SLACK_PP)]
    pub slack: f64,
    /// Screen on the test split instead of the held-out validation split.
    #[arg(long)]
    pub on_test: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model_in: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long)]
    pub thresholds: Option<String>,
}

pub fn parse_thresholds(text: &str) -> Result<ThresholdVector> {
    let values = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad threshold {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdVector::new(values)?)
}

pub fn parse_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|coord| {
            coord
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad grid value {s:?}")))
                .collect()
        })
        .collect()
}

fn timestamped(body: String, suppress: bool) -> String {
    if suppress {
        return body;
    }
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# generated_unix_time={secs}\n{body}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_checked(path: &Path) -> Result<LoadedModel> {
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    ensure!(
        model.checksum_ok,
        "model {} failed its payload checksum (file corrupted)",
        path.display()
    );
    Ok(model)
}

struct Splits {
    train: Dataset,
    validation: Dataset,
}

fn load_splits(args: &DataArgs) -> Result<Splits> {
    let files = MnistFiles::in_dir(&args.data_dir);
    let mut train = files.load_train()?;
    if let Some(n) = args.train_limit {
        train = train.head(n)?;
    }
    let split = DatasetSplit::carve(&train, load_test(args)?, args.validation_size, args.seed)?;
    Ok(Splits {
        train: split.train,
        validation: split.validation,
    })
}

fn load_test(args: &DataArgs) -> Result<Dataset> {
    let test = MnistFiles::in_dir(&args.data_dir).load_test()?;
    Ok(match args.test_limit {
        Some(n) => test.head(n)?,
        None => test,
    })
}

fn thresholds_for(net: &Network, text: Option<&str>) -> Result<ThresholdVector> {
    let t = match text {
        Some(t) => parse_thresholds(t)?,
        None => ThresholdVector::closed(net.num_exits()),
    };
    t.check_for(net)?;
    Ok(t)
}

fn load_config(path: Option<&Path>) -> Result<(NetworkSpec, TrainConfig)> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => B_LENET_CONFIG.to_string(),
    };
    Ok(parse_config(&text)?)
}

fn run_train(args: &TrainArgs, phase: Phase) -> Result<()> {
    if phase == Phase::Branchy && args.init_from.is_none() {
        bail!(
            "train-branchy needs --init-from <baseline model>: the branchy network is \
             warm-started from a trained baseline (train it first with train-baseline)"
        );
    }
    let (spec, mut config) = load_config(args.config.as_deref())?;
    config.seed = args.data.seed;
    config.phase = phase;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let splits = load_splits(&args.data)?;
    info!(
        "{} training / {} validation examples",
        splits.train.len(),
        splits.validation.len()
    );
    let (net, outcome) = match phase {
        Phase::Baseline => {
            let net = Network::new(spec.trunk_only())?;
            let outcome = train_baseline(&net, &splits.train, Some(&splits.validation), &config)?;
            (net, outcome)
        }
        Phase::Branchy => {
            let init = args.init_from.as_deref().expect("checked above");
            let baseline = load_checked(init)?;
            let net = Network::new(spec)?;
            let warm = init_branchy_from_baseline(&net, &baseline.network, &baseline.params, config.seed)?;
            let outcome = train_branchy(&net, warm, &splits.train, Some(&splits.validation), &config)?;
            (net, outcome)
        }
    };
    if let Some(out) = &args.out {
        write_text(out, &timestamped(metrics_csv(&outcome.metrics), args.no_timestamp))?;
    }
    save_model(&args.model_out, &net, &outcome.params)?;
    for m in outcome.metrics.iter().filter(|m| m.epoch == config.epochs) {
        println!(
            "epoch {} {} exit {}: loss {:.6} accuracy {:.4}",
            m.epoch,
            m.split.as_str(),
            m.exit,
            m.loss,
            m.accuracy
        );
    }
    println!("wrote {}", args.model_out.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let model = load_checked(&args.model_in)?;
    let test = load_test(&args.data)?;
    let t = thresholds_for(&model.network, args.thresholds.as_deref())?;
    let mut rows = Vec::new();
    let report = evaluate(
        &model.network,
        &model.params,
        &test,
        &t,
        args.trace.as_ref().map(|_| &mut rows),
    )?;
    if let Some(path) = &args.trace {
        write_text(path, &timestamped(trace_csv(&rows), args.no_timestamp))?;
    }
    println!("{}", report.table_row());
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let model = load_checked(&args.model_in)?;
    let net = &model.network;
    ensure!(net.num_exits() > 1, "sweeping needs a model with at least one branch");
    let data = if args.on_test {
        load_test(&args.data)?
    } else {
        load_splits(&args.data)?.validation
    };
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(net.num_exits(), net.num_classes()),
    };
    let report = sweep(net, &model.params, &data, &grid, args.slack)?;
    write_text(&args.out, &timestamped(report.to_csv(), args.no_timestamp))?;
    let knee = report.knee_point();
    let fractions: Vec<String> = knee.exit_fractions.iter().map(|f| format!("{:.2}", 100.0 * f)).collect();
    println!(
        "knee{}: T [{}] acc {:.2}% (baseline {:.2}%) | avg MACs {:.0} | speedup {:.2}x | exit % [{}]",
        if report.knee.status == KneeStatus::NoPointWithinSlack {
            " (WARNING: no point within slack, most accurate point shown)"
        } else {
            ""
        },
        knee.thresholds,
        100.0 * knee.accuracy,
        100.0 * report.baseline_accuracy,
        knee.expected_macs,
        knee.speedup,
        fractions.join(", ")
    );
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let model = load_checked(&args.model_in)?;
    let test = load_test(&args.data)?;
    let t = thresholds_for(&model.network, args.thresholds.as_deref())?;
    let ex = test.example(args.sample)?;
    let (d, cost) = fast_inference(&model.network, &model.params, &ex.image, &t)?;
    let entropies: Vec<String> = d.entropies.iter().map(|e| format!("{e:.6}")).collect();
    println!(
        "sample {} label {} -> predicted {} at exit {} (entropy {:.6}; per-exit entropies [{}]) macs {}",
        args.sample,
        ex.label,
        d.predicted_class,
        d.exit_index,
        d.entropy,
        entropies.join(", "),
        cost.macs_evaluated
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBaseline(a) => run_train(a, Phase::Baseline),
        Command::TrainBranchy(a) => run_train(a, Phase::Branchy),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Infer(a) => run_infer(a),
    }
}
