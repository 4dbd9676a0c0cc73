//! Command-line front end: dataset generation, training, evaluation, the
//! stage on/off study, and gradient verification as reproducible
//! subcommands. Human-readable logs go to standard error; machine-readable
//! results go to files and standard output.
//!
//! Exit codes: 0 success, 1 I/O trouble, 2 bad flags or config, 3 training
//! diverged to a non-finite loss, 4 gradient checks failed.

mod config;

use clap::{Parser, Subcommand};
use config::{ConfigError, RunConfig};
use speckle_core::data::synth::{generate, SynthError, SynthSpec};
use speckle_core::data::{DataError, Dataset};
use speckle_core::evaluator::{evaluate_model, run_ablation, ConfusionMatrix, EvalError, MetricsReport};
use speckle_core::trainer::{fit, load_checkpoint, CheckpointError, TrainError};
use speckle_core::verify::{run_gradient_suite, VerifyError};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "speckle", version, about = "Recognition lab for speckled imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic speckled dataset.
    GenData(GenDataArgs),
    /// Train a model as described by a config file.
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Run the stage on/off study over several seeds.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Number of target classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root to create.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set epochs=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding the test split.
    #[arg(long)]
    data: PathBuf,
    /// Images per forward pass.
    #[arg(long, default_value_t = 32)]
    chunk: usize,
    /// Where to write the confusion matrix (default: confusion.csv in the
    /// checkpoint directory).
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    /// TOML run configuration shared by every variant.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, one full study per seed.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Override one config key, e.g. --set epochs=60.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Varies probe values, never coverage or outcomes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{message}")]
    Flag { message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{failures} of {total} gradient checks failed")]
    GradCheckFailed { failures: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Flag { .. } => 2,
            CliError::Config(e) if e.is_usage() => 2,
            CliError::Config(_) => 1,
            CliError::Io { .. } => 1,
            CliError::Synth(SynthError::BadSpec { .. }) => 2,
            CliError::Synth(_) => 1,
            CliError::Data(_) => 1,
            CliError::Train(e) => train_exit_code(e),
            CliError::Checkpoint(_) => 1,
            CliError::Eval(e) => eval_exit_code(e),
            CliError::Verify(_) | CliError::GradCheckFailed { .. } => 4,
        }
    }
}

fn train_exit_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Diverged { .. } => 3,
        TrainError::NoEpochs
        | TrainError::WarmupTooLong { .. }
        | TrainError::ZeroCosinePeriod
        | TrainError::Sampler(_) => 2,
        _ => 1,
    }
}

fn eval_exit_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Run { source, .. } => train_exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    if args.classes < 2 {
        return Err(CliError::Flag {
            message: "need at least 2 classes".to_string(),
        });
    }
    let spec = SynthSpec {
        classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        image_size: args.size,
        seed: args.seed,
    };
    let summary = generate(&args.out, &spec)?;
    eprintln!("classes: {}", summary.class_names.join(", "));
    println!(
        "wrote {} files under {}",
        summary.files_written,
        summary.root.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let run = RunConfig::load(&args.config, &args.set)?;
    let train = Dataset::load(&run.data, "train", run.image_size)?;
    let test = Dataset::load(&run.data, "test", run.image_size)?;
    fs::create_dir_all(&run.out).map_err(|source| CliError::Io {
        path: run.out.clone(),
        source,
    })?;
    run.echo(&run.out.join("config.toml"))?;
    eprintln!(
        "training on {} images across {} classes for {} epochs",
        train.len(),
        train.classes(),
        run.epochs
    );
    let report = fit(&train, &test, &run.train_config(), &run.out)?;
    eprintln!("metrics: {}", report.metrics_path.display());
    eprintln!("checkpoint: {}", report.checkpoint_dir.display());
    println!("final_accuracy={}", report.final_accuracy);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(&args.data, "test", loaded.meta.image_size)?;
    if data.class_names != loaded.meta.class_names {
        return Err(CliError::Flag {
            message: format!(
                "checkpoint classes [{}] do not match dataset classes [{}]",
                loaded.meta.class_names.join(", "),
                data.class_names.join(", ")
            ),
        });
    }
    let (cm, report) = evaluate_model(&loaded.model, &data, args.chunk)?;
    let confusion_path = args
        .confusion
        .unwrap_or_else(|| args.checkpoint.join("confusion.csv"));
    write_confusion_csv(&confusion_path, &cm, &data.class_names)?;
    eprintln!("confusion matrix: {}", confusion_path.display());
    print!("{}", render_metrics(&report, &data.class_names));
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let run = RunConfig::load(&args.config, &args.set)?;
    let seeds = parse_seeds(&args.seeds)?;
    let train = Dataset::load(&run.data, "train", run.image_size)?;
    let test = Dataset::load(&run.data, "test", run.image_size)?;
    fs::create_dir_all(&run.out).map_err(|source| CliError::Io {
        path: run.out.clone(),
        source,
    })?;
    run.echo(&run.out.join("config.toml"))?;
    let csv_path = run.out.join("ablation.csv");
    let work_dir = run.out.join("runs");
    eprintln!(
        "running the stage study over seeds {:?} into {}",
        seeds,
        run.out.display()
    );
    let table = run_ablation(&train, &test, &run.train_config(), &seeds, &csv_path, &work_dir)?;
    if table.resumed > 0 {
        eprintln!("skipped {} rows already in {}", table.resumed, csv_path.display());
    }
    let summary = table
        .config_means()
        .into_iter()
        .map(|(name, mean)| format!("{name}={mean}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("summary {summary}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let checks = run_gradient_suite(args.seed)?;
    let total = checks.len();
    let mut failures = 0usize;
    for check in &checks {
        let tag = if check.pass { "PASS" } else { "FAIL" };
        if !check.pass {
            failures += 1;
        }
        println!("{tag} {} max_rel_err={:e}", check.name, check.max_rel_err);
    }
    if failures > 0 {
        return Err(CliError::GradCheckFailed { failures, total });
    }
    eprintln!("all {total} gradient checks passed");
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> = text.split(',').map(|s| s.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|e| CliError::Flag {
        message: format!("--seeds {text}: {e}"),
    })?;
    if seeds.is_empty() {
        return Err(CliError::Flag {
            message: "--seeds needs at least one seed".to_string(),
        });
    }
    Ok(seeds)
}

/// One row per true class, one column per predicted class.
fn write_confusion_csv(
    path: &std::path::Path,
    cm: &ConfusionMatrix,
    class_names: &[String],
) -> Result<(), CliError> {
    let mut text = format!("true\\pred,{}\n", class_names.join(","));
    for (name, row) in class_names.iter().zip(cm.rows()) {
        let counts: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&format!("{name},{}\n", counts.join(",")));
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn render_metrics(report: &MetricsReport, class_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!("accuracy={}\n", report.accuracy));
    out.push_str(&format!("macro_recall={}\n", report.macro_recall));
    out.push_str(&format!("macro_precision={}\n", report.macro_precision));
    out.push_str(&format!("macro_f1={}\n", report.macro_f1));
    for (i, name) in class_names.iter().enumerate() {
        out.push_str(&format!(
            "class {name} recall={} precision={} f1={}\n",
            report.per_class_recall[i], report.per_class_precision[i], report.per_class_f1[i]
        ));
    }
    if report.zero_division {
        out.push_str("note: a class with no predictions or no samples scored 0\n");
    }
    out
}
